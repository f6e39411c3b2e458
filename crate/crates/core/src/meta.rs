//! Random-effects meta-analysis of correlations in the Fisher-z metric.
//!
//! Each study contributes `z = atanh(r)` with sampling variance `1/(N−3)`.
//! The between-study variance τ² is the restricted maximum likelihood
//! estimate, the pooled effect uses inverse-variance weights `1/(v + τ²)`,
//! and results are back-transformed with `tanh` only for presentation.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::composite::StudyCorrelation;
use crate::dataset::VarPair;
use crate::error::{Error, Result};
use crate::stats::{chi_square_sf, normal_two_sided_p, Z_975};

pub fn fisher_z(r: f64) -> Result<f64> {
    if !r.is_finite() || r.abs() >= 1.0 {
        return Err(Error::Domain(format!("Fisher transform needs |r| < 1, got {r}")));
    }
    Ok(r.atanh())
}

pub fn inv_fisher(z: f64) -> f64 {
    z.tanh()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectPoint {
    pub study_id: String,
    pub z: f64,
    /// Within-study sampling variance of `z`.
    pub v: f64,
    pub n: u32,
}

impl EffectPoint {
    pub fn from_correlation(study_id: impl Into<String>, r: f64, n: u32) -> Result<Self> {
        if n < 4 {
            return Err(Error::Domain(format!("sample size {n} leaves no variance for Fisher z")));
        }
        Ok(EffectPoint {
            study_id: study_id.into(),
            z: fisher_z(r)?,
            v: 1.0 / (f64::from(n) - 3.0),
            n,
        })
    }
}

/// Restricted log-likelihood of τ² up to an additive constant.
pub fn reml_log_likelihood(points: &[EffectPoint], tau2: f64) -> f64 {
    let mut sum_w = 0.0;
    let mut sum_wz = 0.0;
    let mut sum_log_var = 0.0;
    for p in points {
        let total = p.v + tau2;
        sum_w += 1.0 / total;
        sum_wz += p.z / total;
        sum_log_var += total.ln();
    }
    let mu = sum_wz / sum_w;
    let rss: f64 = points.iter().map(|p| (p.z - mu).powi(2) / (p.v + tau2)).sum();
    -0.5 * (sum_log_var + sum_w.ln() + rss)
}

const TAU2_TOLERANCE: f64 = 1e-10;
const SCAN_POINTS: usize = 64;

/// REML estimate of the between-study variance; zero for a single study.
///
/// The objective is scanned on a grid over `[0, max(1, 10·var(z))]` to bracket
/// the best region and then refined with Brent's method. If the maximum sits
/// at the upper edge the interval is widened before refining.
pub fn reml_tau2(points: &[EffectPoint]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let k = points.len() as f64;
    let mean_z = points.iter().map(|p| p.z).sum::<f64>() / k;
    let var_z = points.iter().map(|p| (p.z - mean_z).powi(2)).sum::<f64>() / (k - 1.0);
    if var_z == 0.0 {
        return 0.0;
    }

    let objective = |t: f64| -reml_log_likelihood(points, t);
    let mut upper = (10.0 * var_z).max(1.0);
    let (lo, hi) = loop {
        let grid: Vec<f64> = (0..SCAN_POINTS)
            .map(|i| {
                let s = i as f64 / (SCAN_POINTS - 1) as f64;
                upper * s * s
            })
            .collect();
        let best = grid
            .iter()
            .enumerate()
            .map(|(i, &t)| (i, objective(t)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if best == SCAN_POINTS - 1 && upper < 1e6 {
            upper *= 4.0;
            continue;
        }
        break (grid[best.saturating_sub(1)], grid[(best + 1).min(SCAN_POINTS - 1)]);
    };

    let (t_min, f_min) = brent_minimize(objective, lo, hi, TAU2_TOLERANCE);
    if objective(0.0) <= f_min {
        return 0.0;
    }
    polish_root(points, lo, hi).unwrap_or(t_min.max(0.0))
}

/// Derivative of [`reml_log_likelihood`] with respect to τ².
pub fn reml_score(points: &[EffectPoint], tau2: f64) -> f64 {
    let w: Vec<f64> = points.iter().map(|p| 1.0 / (p.v + tau2)).collect();
    let sum_w: f64 = w.iter().sum();
    let sum_w2: f64 = w.iter().map(|x| x * x).sum();
    let mu = points.iter().zip(&w).map(|(p, w)| w * p.z).sum::<f64>() / sum_w;
    let weighted_rss: f64 = points.iter().zip(&w).map(|(p, w)| w * w * (p.z - mu).powi(2)).sum();
    -0.5 * (sum_w - sum_w2 / sum_w - weighted_rss)
}

/// Bisection on the score inside the bracket found by the scan. Brent on the
/// likelihood alone stops near sqrt(machine epsilon) relative accuracy
/// because the objective is flat at its maximum; the score has a clean root.
fn polish_root(points: &[EffectPoint], lo: f64, hi: f64) -> Option<f64> {
    let (mut a, mut b) = (lo, hi);
    if !(reml_score(points, a) > 0.0 && reml_score(points, b) < 0.0) {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if reml_score(points, mid) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    Some(0.5 * (a + b))
}

/// Bounded scalar minimisation (golden section with parabolic steps).
fn brent_minimize<F: Fn(f64) -> f64>(f: F, lower: f64, upper: f64, xtol: f64) -> (f64, f64) {
    const GOLDEN: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (lower, upper);
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;

    for _ in 0..500 {
        let mid = 0.5 * (a + b);
        let tol1 = 1.5e-8 * x.abs() + xtol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - mid).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            e = d;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if mid >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= mid { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Random-effects summary for one variable pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledCell {
    pub theta_z: f64,
    pub se_theta: f64,
    pub tau2: f64,
    pub r: f64,
    pub ci_z: (f64, f64),
    pub ci_r: (f64, f64),
    pub z_stat: f64,
    pub p_z: f64,
    /// Cochran's Q with fixed-effect weights; 0 for a single study.
    pub q: f64,
    pub p_q: Option<f64>,
    /// Percent; absent for a single study.
    pub i2: Option<f64>,
    pub h2: Option<f64>,
    pub k: usize,
    pub n_total: u64,
}

pub fn pool_cell(points: &[EffectPoint]) -> Result<PooledCell> {
    if points.is_empty() {
        return Err(Error::Domain("cannot pool zero studies".into()));
    }
    let k = points.len();
    let tau2 = reml_tau2(points);

    let (sum_w, sum_wz) = points.iter().fold((0.0, 0.0), |(sw, swz), p| {
        let w = 1.0 / (p.v + tau2);
        (sw + w, swz + w * p.z)
    });
    let theta_z = sum_wz / sum_w;
    let se_theta = sum_w.powf(-0.5);
    let ci_z = (theta_z - Z_975 * se_theta, theta_z + Z_975 * se_theta);
    let z_stat = theta_z / se_theta;

    let (q, p_q, i2, h2) = if k == 1 {
        (0.0, None, None, None)
    } else {
        let (fw, fwz) = points.iter().fold((0.0, 0.0), |(sw, swz), p| (sw + 1.0 / p.v, swz + p.z / p.v));
        let fixed_mean = fwz / fw;
        let q: f64 = points.iter().map(|p| (p.z - fixed_mean).powi(2) / p.v).sum();
        let df = (k - 1) as f64;
        let i2 = if q > 0.0 { ((q - df) / q).max(0.0) * 100.0 } else { 0.0 };
        (q, Some(chi_square_sf(q, df)), Some(i2), Some(q / df))
    };

    Ok(PooledCell {
        theta_z,
        se_theta,
        tau2,
        r: inv_fisher(theta_z),
        ci_z,
        ci_r: (inv_fisher(ci_z.0), inv_fisher(ci_z.1)),
        z_stat,
        p_z: normal_two_sided_p(z_stat),
        q,
        p_q,
        i2,
        h2,
        k,
        n_total: points.iter().map(|p| u64::from(p.n)).sum(),
    })
}

/// Study-level row of a forest display.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForestRow {
    pub pair: VarPair,
    pub study_id: String,
    pub n: u32,
    pub r: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// Share of the random-effects weight, in percent.
    pub weight: f64,
}

/// Pooled cells for every pair of `variables` with at least one study.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledTable {
    variables: Vec<String>,
    cells: BTreeMap<VarPair, PooledCell>,
    inputs: BTreeMap<VarPair, Vec<EffectPoint>>,
}

impl PooledTable {
    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn get(&self, a: &str, b: &str) -> Option<&PooledCell> {
        self.cells.get(&VarPair::new(a, b))
    }

    pub fn cells(&self) -> &BTreeMap<VarPair, PooledCell> {
        &self.cells
    }

    pub fn inputs(&self, a: &str, b: &str) -> Option<&[EffectPoint]> {
        self.inputs.get(&VarPair::new(a, b)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Pairs of the table's variables with no study, in display order.
    pub fn missing_pairs(&self) -> Vec<VarPair> {
        self.display_pairs().into_iter().filter(|p| !self.cells.contains_key(p)).collect()
    }

    /// All pairs in lower-triangle display order (row variable after column variable).
    pub fn display_pairs(&self) -> Vec<VarPair> {
        let mut out = Vec::new();
        for (i, a) in self.variables.iter().enumerate() {
            for b in &self.variables[..i] {
                out.push(VarPair::new(a.as_str(), b.as_str()));
            }
        }
        out
    }

    pub fn forest_rows(&self) -> Vec<ForestRow> {
        let mut rows = Vec::new();
        for pair in self.display_pairs() {
            let (Some(cell), Some(points)) = (self.cells.get(&pair), self.inputs.get(&pair)) else {
                continue;
            };
            let total_w: f64 = points.iter().map(|p| 1.0 / (p.v + cell.tau2)).sum();
            for p in points {
                let half = Z_975 * p.v.sqrt();
                rows.push(ForestRow {
                    pair: pair.clone(),
                    study_id: p.study_id.clone(),
                    n: p.n,
                    r: inv_fisher(p.z),
                    ci_lower: inv_fisher(p.z - half),
                    ci_upper: inv_fisher(p.z + half),
                    weight: 100.0 / (p.v + cell.tau2) / total_w,
                });
            }
        }
        rows
    }
}

/// Pools every pair of `variables`; pairs without studies are left out and
/// reported by [`PooledTable::missing_pairs`].
pub fn pool_all(correlations: &[StudyCorrelation], variables: &[String]) -> Result<PooledTable> {
    let mut inputs: BTreeMap<VarPair, Vec<EffectPoint>> = BTreeMap::new();
    for sc in correlations {
        if !(variables.iter().any(|v| v == sc.pair.first()) && variables.iter().any(|v| v == sc.pair.second())) {
            continue;
        }
        inputs
            .entry(sc.pair.clone())
            .or_default()
            .push(EffectPoint::from_correlation(sc.study_id.clone(), sc.r, sc.n)?);
    }
    let cells = inputs
        .iter()
        .map(|(pair, points)| Ok((pair.clone(), pool_cell(points)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(PooledTable {
        variables: variables.to_vec(),
        cells,
        inputs,
    })
}
