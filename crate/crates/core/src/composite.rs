//! Composite correlations: collapsing several measures of one variable
//! within a study into a single correlation.
//!
//! For one measure `x` against `n` measures `y_i` the composite is
//! `Σ r(x, y_i) / sqrt(n + n(n−1)·r̄_yy)`. For several measures on both sides
//! (`cross` is `n_x × n_y`) it is `ΣR_xy / (sqrt(ΣR_xx) · sqrt(ΣR_yy))`, each
//! symbol standing for the sum of the matrix entries; `sqrt(ΣR_xx)` is the
//! standard deviation of the unit-weighted sum of the x measures.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::dataset::{InterCorrelation, ObservationGroup, VarPair};
use crate::error::{Error, Result};

/// Values within this distance outside (−1, 1) are clamped, beyond it they
/// are rejected.
const RANGE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeInput {
    cross: DMatrix<f64>,
    xx: DMatrix<f64>,
    yy: DMatrix<f64>,
}

impl CompositeInput {
    pub fn new(cross: DMatrix<f64>, xx: DMatrix<f64>, yy: DMatrix<f64>) -> Result<Self> {
        let (nx, ny) = cross.shape();
        if nx == 0 || ny == 0 {
            return Err(Error::Composite("empty cross-correlation matrix".into()));
        }
        if xx.shape() != (nx, nx) || yy.shape() != (ny, ny) {
            return Err(Error::Composite(format!(
                "inconsistent dimensions: cross {nx}×{ny}, xx {:?}, yy {:?}",
                xx.shape(),
                yy.shape()
            )));
        }
        if cross.iter().any(|r| !r.is_finite() || r.abs() >= 1.0) {
            return Err(Error::Composite("cross-correlation outside (-1, 1)".into()));
        }
        for (name, m) in [("xx", &xx), ("yy", &yy)] {
            check_inter_matrix(name, m)?;
        }
        Ok(CompositeInput { cross, xx, yy })
    }

    pub fn cross(&self) -> &DMatrix<f64> {
        &self.cross
    }
}

fn check_inter_matrix(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let n = m.nrows();
    for i in 0..n {
        if m[(i, i)] != 1.0 {
            return Err(Error::Composite(format!("{name} diagonal must be 1")));
        }
        for j in 0..i {
            let v = m[(i, j)];
            if (v - m[(j, i)]).abs() > 1e-12 {
                return Err(Error::Composite(format!("{name} is not symmetric")));
            }
            // Perfectly redundant measures (r = 1) are allowed here.
            if !v.is_finite() || v.abs() > 1.0 {
                return Err(Error::Composite(format!("{name} entry {v} outside [-1, 1]")));
            }
        }
    }
    Ok(())
}

fn finish(value: f64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::Composite("composite is not finite".into()));
    }
    if value.abs() < 1.0 {
        return Ok(value);
    }
    if value.abs() <= 1.0 + RANGE_TOLERANCE {
        return Ok(value.signum() * (1.0 - f64::EPSILON));
    }
    Err(Error::Composite(format!(
        "composite correlation {value} outside (-1, 1); inter-correlations are inconsistent"
    )))
}

/// Composite of a single measure against `r_xy.len()` measures of the other
/// variable whose mean inter-correlation is `rbar_yy`.
pub fn composite_one_many(r_xy: &[f64], rbar_yy: f64) -> Result<f64> {
    if r_xy.is_empty() {
        return Err(Error::Composite("no cross-correlations".into()));
    }
    if !rbar_yy.is_finite() || rbar_yy.abs() > 1.0 {
        return Err(Error::Composite(format!("mean inter-correlation {rbar_yy} outside [-1, 1]")));
    }
    let n = r_xy.len() as f64;
    let denom = n + n * (n - 1.0) * rbar_yy;
    if denom <= 0.0 {
        return Err(Error::Composite(format!(
            "non-positive denominator {denom} (mean inter-correlation {rbar_yy} too negative)"
        )));
    }
    finish(r_xy.iter().sum::<f64>() / denom.sqrt())
}

pub fn composite_many_many(input: &CompositeInput) -> Result<f64> {
    let sum_xx = input.xx.sum();
    let sum_yy = input.yy.sum();
    if sum_xx <= 0.0 || sum_yy <= 0.0 {
        return Err(Error::Composite(format!(
            "non-positive denominator (ΣRxx = {sum_xx}, ΣRyy = {sum_yy})"
        )));
    }
    finish(input.cross.sum() / (sum_xx.sqrt() * sum_yy.sqrt()))
}

fn inter_matrix(study_id: &str, measures: &[&str], within: &[InterCorrelation]) -> Result<DMatrix<f64>> {
    let n = measures.len();
    let mut m = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let found = within.iter().find(|ic| {
                (ic.measure_a == measures[i] && ic.measure_b == measures[j]) || (ic.measure_a == measures[j] && ic.measure_b == measures[i])
            });
            let Some(ic) = found else {
                return Err(Error::MissingInterCorrelation {
                    study_id: study_id.to_string(),
                    measure_a: measures[i].to_string(),
                    measure_b: measures[j].to_string(),
                });
            };
            m[(i, j)] = ic.r;
            m[(j, i)] = ic.r;
        }
    }
    Ok(m)
}

fn mean_off_diagonal(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    (m.sum() - n as f64) / (n * (n - 1)) as f64
}

/// Reduces one study's observations for a canonical pair to a single correlation.
pub fn compose_group(group: &ObservationGroup) -> Result<f64> {
    if group.cross.is_empty() {
        return Err(Error::Composite(format!(
            "study {} has no observations for {}",
            group.study_id, group.pair
        )));
    }
    if group.cross.iter().any(|c| c.precomposed) {
        if group.cross.len() != 1 {
            return Err(Error::Composite(format!(
                "study {} mixes a precomposed value with other observations for {}",
                group.study_id, group.pair
            )));
        }
        return Ok(group.cross[0].r);
    }

    let xs = group.measures_x();
    let ys = group.measures_y();
    let mut cross = DMatrix::zeros(xs.len(), ys.len());
    let mut filled = 0usize;
    for c in &group.cross {
        let i = xs.iter().position(|m| *m == c.measure_x).expect("measure from group");
        let j = ys.iter().position(|m| *m == c.measure_y).expect("measure from group");
        cross[(i, j)] = c.r;
        filled += 1;
    }
    if filled != xs.len() * ys.len() {
        return Err(Error::Composite(format!(
            "study {}: {} of {} cross-correlations present for {}",
            group.study_id,
            filled,
            xs.len() * ys.len(),
            group.pair
        )));
    }

    match (xs.len(), ys.len()) {
        (1, 1) => Ok(cross[(0, 0)]),
        (1, _) => {
            let yy = inter_matrix(&group.study_id, &ys, &group.within_y)?;
            composite_one_many(cross.row(0).iter().copied().collect::<Vec<_>>().as_slice(), mean_off_diagonal(&yy))
        }
        (_, 1) => {
            let xx = inter_matrix(&group.study_id, &xs, &group.within_x)?;
            composite_one_many(
                cross.column(0).iter().copied().collect::<Vec<_>>().as_slice(),
                mean_off_diagonal(&xx),
            )
        }
        _ => {
            let xx = inter_matrix(&group.study_id, &xs, &group.within_x)?;
            let yy = inter_matrix(&group.study_id, &ys, &group.within_y)?;
            composite_many_many(&CompositeInput::new(cross, xx, yy)?)
        }
    }
}

/// One study-level correlation for a canonical pair, ready for pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyCorrelation {
    pub study_id: String,
    pub pair: VarPair,
    pub r: f64,
    pub n: u32,
}

pub fn compose_all(groups: &[ObservationGroup], sample_sizes: &HashMap<String, u32>) -> Result<Vec<StudyCorrelation>> {
    groups
        .iter()
        .map(|g| {
            let n = *sample_sizes
                .get(&g.study_id)
                .ok_or_else(|| Error::Domain(format!("no sample size for study `{}`", g.study_id)))?;
            Ok(StudyCorrelation {
                study_id: g.study_id.clone(),
                pair: g.pair.clone(),
                r: compose_group(g)?,
                n,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::dataset::{apply_cluster, fixtures, CrossCorrelation};

    #[test]
    fn one_many_with_single_measure_is_identity() {
        assert_eq!(composite_one_many(&[0.5], 0.2).unwrap(), 0.5);
    }

    #[test]
    fn one_many_redundant_measures_average() {
        assert_abs_diff_eq!(composite_one_many(&[0.4, 0.4], 1.0).unwrap(), 0.4, epsilon = 1e-15);
    }

    #[test]
    fn one_many_hand_value() {
        let expected = 0.8 / 3.2f64.sqrt();
        assert_abs_diff_eq!(composite_one_many(&[0.3, 0.5], 0.6).unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn one_many_negative_denominator() {
        // n = 3, r̄ = −0.6: 3 + 6·(−0.6) < 0
        let err = composite_one_many(&[0.1, 0.1, 0.1], -0.6).unwrap_err();
        assert!(err.to_string().contains("non-positive"));
    }

    #[test]
    fn one_many_out_of_range_result() {
        // Strong cross-correlations with nearly independent measures are inconsistent.
        assert!(composite_one_many(&[0.9, 0.9, 0.9], 0.0).is_err());
    }

    #[test]
    fn many_many_single_cell_is_identity() {
        let input = CompositeInput::new(DMatrix::from_element(1, 1, 0.37), DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap();
        assert_eq!(composite_many_many(&input).unwrap(), 0.37);
    }

    #[test]
    fn many_many_two_by_two_hand_value() {
        let inter = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let input = CompositeInput::new(DMatrix::from_element(2, 2, 0.4), inter.clone(), inter).unwrap();
        assert_abs_diff_eq!(composite_many_many(&input).unwrap(), 1.6 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let err = CompositeInput::new(DMatrix::from_element(2, 3, 0.1), DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap_err();
        assert!(err.to_string().contains("inconsistent"));
    }

    #[test]
    fn precomposed_fixture_row_passes_through() {
        let (data, cluster) = fixtures::parsimonious();
        let groups = apply_cluster(data.observations(), &cluster).unwrap();
        let sun = groups
            .iter()
            .find(|g| g.study_id == "Sun2020" && g.pair == VarPair::new("EC", "INT"))
            .unwrap();
        assert!(sun.cross[0].precomposed);
        assert_eq!(compose_group(sun).unwrap(), 0.632);
    }

    fn group(cross: Vec<(&str, &str, f64)>, within_x: Vec<(&str, &str, f64)>) -> ObservationGroup {
        ObservationGroup {
            study_id: "S".into(),
            pair: VarPair::new("A", "B"),
            cross: cross
                .into_iter()
                .map(|(x, y, r)| CrossCorrelation {
                    measure_x: x.into(),
                    measure_y: y.into(),
                    r,
                    precomposed: false,
                })
                .collect(),
            within_x: within_x
                .into_iter()
                .map(|(a, b, r)| InterCorrelation {
                    measure_a: a.into(),
                    measure_b: b.into(),
                    r,
                })
                .collect(),
            within_y: vec![],
        }
    }

    #[test]
    fn single_measure_group_is_unchanged() {
        let g = group(vec![("a1", "b1", -0.21)], vec![]);
        assert_eq!(compose_group(&g).unwrap(), -0.21);
    }

    #[test]
    fn two_by_one_group_matches_one_many() {
        let g = group(vec![("a1", "b1", 0.3), ("a2", "b1", 0.5)], vec![("a2", "a1", 0.6)]);
        let expected = composite_one_many(&[0.3, 0.5], 0.6).unwrap();
        assert_eq!(compose_group(&g).unwrap(), expected);
    }

    #[test]
    fn missing_inter_correlation_is_an_error() {
        let g = group(vec![("a1", "b1", 0.3), ("a2", "b1", 0.5)], vec![]);
        assert!(matches!(compose_group(&g).unwrap_err(), Error::MissingInterCorrelation { .. }));
    }

    #[test]
    fn mixed_precomposed_group_rejected() {
        let mut g = group(vec![("a1", "b1", 0.3), ("a2", "b1", 0.5)], vec![("a1", "a2", 0.6)]);
        g.cross[0].precomposed = true;
        assert!(compose_group(&g).is_err());
    }

    /// Random valid correlation matrix of size `n` from a Gram matrix of unit vectors.
    fn unit_gram(vectors: &[Vec<f64>]) -> DMatrix<f64> {
        let normed: Vec<Vec<f64>> = vectors
            .iter()
            .map(|v| {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / norm).collect()
            })
            .collect();
        let n = normed.len();
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else {
                normed[i].iter().zip(&normed[j]).map(|(a, b)| a * b).sum()
            }
        })
    }

    fn vectors(count: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.05f64..1.0, 4), count)
    }

    proptest! {
        #[test]
        fn many_many_reduces_to_one_many(vs in vectors(3..=6)) {
            // First vector is x, the rest are the y measures.
            let full = unit_gram(&vs);
            let ny = vs.len() - 1;
            let cross = full.view((0, 1), (1, ny)).into_owned();
            let yy = full.view((1, 1), (ny, ny)).into_owned();
            let rbar = mean_off_diagonal(&yy);
            let one = composite_one_many(cross.row(0).iter().copied().collect::<Vec<_>>().as_slice(), rbar).unwrap();
            let many = composite_many_many(&CompositeInput::new(cross, DMatrix::identity(1, 1), yy).unwrap()).unwrap();
            prop_assert!((one - many).abs() < 1e-12);
        }

        #[test]
        fn composite_is_permutation_invariant(vs in vectors(4..=6), seed in any::<u64>()) {
            let full = unit_gram(&vs);
            let nx = 2;
            let ny = vs.len() - nx;
            let build = |order_x: &[usize], order_y: &[usize]| {
                let cross = DMatrix::from_fn(nx, ny, |i, j| full[(order_x[i], nx + order_y[j])]);
                let xx = DMatrix::from_fn(nx, nx, |i, j| full[(order_x[i], order_x[j])]);
                let yy = DMatrix::from_fn(ny, ny, |i, j| full[(nx + order_y[i], nx + order_y[j])]);
                composite_many_many(&CompositeInput::new(cross, xx, yy).unwrap()).unwrap()
            };
            let ident_x: Vec<usize> = (0..nx).collect();
            let ident_y: Vec<usize> = (0..ny).collect();
            let mut perm_y = ident_y.clone();
            perm_y.rotate_left((seed as usize) % ny);
            let a = build(&ident_x, &ident_y);
            let b = build(&[1, 0], &perm_y);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn identical_measures_give_the_common_correlation(r in -0.95f64..0.95, nx in 1usize..4, ny in 1usize..4) {
            let input = CompositeInput::new(
                DMatrix::from_element(nx, ny, r),
                DMatrix::from_element(nx, nx, 1.0),
                DMatrix::from_element(ny, ny, 1.0),
            ).unwrap();
            prop_assert!((composite_many_many(&input).unwrap() - r).abs() < 1e-12);
        }
    }
}
