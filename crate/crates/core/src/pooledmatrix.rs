//! Assembly of pooled correlations into a matrix for path analysis.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::dataset::VarPair;
use crate::error::{Error, Result};
use crate::meta::PooledTable;

/// Eigenvalues at or below this make the matrix unusable.
pub const PD_TOLERANCE: f64 = 1e-10;
/// Eigenvalues below this are flagged as near-singular.
pub const NEAR_SINGULAR: f64 = 1e-4;
/// Floor applied to eigenvalues by [`repair_positive_definite`].
pub const REPAIR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PooledMatrix {
    pub variables: Vec<String>,
    pub r_matrix: DMatrix<f64>,
    /// Cumulative sample size behind each off-diagonal cell; the diagonal holds 0.
    pub n_cells: DMatrix<f64>,
    /// Harmonic mean of the off-diagonal cumulative sample sizes.
    pub n_harmonic: f64,
    /// Pairs left as NaN by [`assemble_partial`].
    pub missing_pairs: Vec<VarPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Definiteness {
    PositiveDefinite,
    NearSingular,
    NotPositiveDefinite,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdCheck {
    pub min_eigenvalue: f64,
    pub verdict: Definiteness,
}

/// Builds the matrix of pooled correlations for `variables`; every pair must
/// have a pooled estimate.
pub fn assemble(table: &PooledTable, variables: &[String]) -> Result<PooledMatrix> {
    let m = assemble_partial(table, variables)?;
    if m.missing_pairs.is_empty() {
        Ok(m)
    } else {
        Err(Error::MissingPairs(m.missing_pairs.iter().map(ToString::to_string).collect()))
    }
}

/// Like [`assemble`] but leaves missing cells as NaN and lists them.
/// The harmonic mean then covers the available pairs only.
pub fn assemble_partial(table: &PooledTable, variables: &[String]) -> Result<PooledMatrix> {
    if variables.len() < 2 {
        return Err(Error::Domain("a pooled matrix needs at least two variables".into()));
    }
    for (i, v) in variables.iter().enumerate() {
        if variables[..i].contains(v) {
            return Err(Error::Domain(format!("variable {v} listed twice")));
        }
    }
    let p = variables.len();
    let mut r = DMatrix::<f64>::identity(p, p);
    let mut n = DMatrix::<f64>::zeros(p, p);
    let mut missing = Vec::new();
    for i in 0..p {
        for j in 0..i {
            match table.get(&variables[i], &variables[j]) {
                Some(cell) => {
                    r[(i, j)] = cell.r;
                    r[(j, i)] = cell.r;
                    n[(i, j)] = cell.n_total as f64;
                    n[(j, i)] = cell.n_total as f64;
                }
                None => {
                    r[(i, j)] = f64::NAN;
                    r[(j, i)] = f64::NAN;
                    missing.push(VarPair::new(variables[i].as_str(), variables[j].as_str()));
                }
            }
        }
    }
    let n_harmonic = harmonic_mean_cells(&n, &r);
    Ok(PooledMatrix {
        variables: variables.to_vec(),
        r_matrix: r,
        n_cells: n,
        n_harmonic,
        missing_pairs: missing,
    })
}

fn harmonic_mean_cells(n: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    let mut count = 0usize;
    let mut inv = 0.0;
    for i in 0..n.nrows() {
        for j in 0..i {
            if !r[(i, j)].is_nan() {
                count += 1;
                inv += 1.0 / n[(i, j)];
            }
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        count as f64 / inv
    }
}

impl PooledMatrix {
    pub fn dim(&self) -> usize {
        self.variables.len()
    }

    pub fn index_of(&self, var: &str) -> Option<usize> {
        self.variables.iter().position(|v| v == var)
    }

    /// Arithmetic mean of the off-diagonal cumulative sample sizes.
    pub fn n_arithmetic(&self) -> f64 {
        let mut count = 0usize;
        let mut sum = 0.0;
        for i in 0..self.dim() {
            for j in 0..i {
                if !self.r_matrix[(i, j)].is_nan() {
                    count += 1;
                    sum += self.n_cells[(i, j)];
                }
            }
        }
        sum / count as f64
    }

    /// Sample size handed to the SEM fitter.
    pub fn n_for_fit(&self) -> f64 {
        self.n_harmonic.round()
    }

    /// Sub-matrix restricted to `vars`, in that order. The harmonic mean is
    /// recomputed over the retained pairs.
    pub fn subset(&self, vars: &[String]) -> Result<PooledMatrix> {
        let idx = vars
            .iter()
            .map(|v| self.index_of(v).ok_or_else(|| Error::UnknownVariable(v.clone())))
            .collect::<Result<Vec<_>>>()?;
        let p = idx.len();
        let r = DMatrix::from_fn(p, p, |i, j| self.r_matrix[(idx[i], idx[j])]);
        let n = DMatrix::from_fn(p, p, |i, j| self.n_cells[(idx[i], idx[j])]);
        let mut missing = Vec::new();
        for i in 0..p {
            for j in 0..i {
                if r[(i, j)].is_nan() {
                    missing.push(VarPair::new(vars[i].as_str(), vars[j].as_str()));
                }
            }
        }
        Ok(PooledMatrix {
            variables: vars.to_vec(),
            n_harmonic: harmonic_mean_cells(&n, &r),
            r_matrix: r,
            n_cells: n,
            missing_pairs: missing,
        })
    }

    /// Builds a matrix from a correlation matrix and a single sample size
    /// used for every cell.
    pub fn from_correlations(variables: Vec<String>, r_matrix: DMatrix<f64>, n: f64) -> Result<Self> {
        let p = variables.len();
        let n_cells = DMatrix::from_fn(p, p, |i, j| if i == j { 0.0 } else { n });
        Self::from_parts(variables, r_matrix, n_cells)
    }

    pub fn from_parts(variables: Vec<String>, r_matrix: DMatrix<f64>, n_cells: DMatrix<f64>) -> Result<Self> {
        let p = variables.len();
        if r_matrix.shape() != (p, p) || n_cells.shape() != (p, p) {
            return Err(Error::Domain(format!("matrix shape does not match {p} variables")));
        }
        let mut missing = Vec::new();
        for i in 0..p {
            if (r_matrix[(i, i)] - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("diagonal entry for {} is not 1", variables[i])));
            }
            for j in 0..i {
                let (a, b) = (r_matrix[(i, j)], r_matrix[(j, i)]);
                if a.is_nan() || b.is_nan() {
                    missing.push(VarPair::new(variables[i].as_str(), variables[j].as_str()));
                    continue;
                }
                if (a - b).abs() > 1e-9 {
                    return Err(Error::Domain(format!(
                        "matrix is not symmetric at {}, {}",
                        variables[i], variables[j]
                    )));
                }
                if a.abs() >= 1.0 {
                    return Err(Error::Domain(format!(
                        "correlation {a} out of range at {}, {}",
                        variables[i], variables[j]
                    )));
                }
                if n_cells[(i, j)].is_nan() || n_cells[(i, j)] <= 0.0 {
                    return Err(Error::Domain(format!(
                        "non-positive sample size at {}, {}",
                        variables[i], variables[j]
                    )));
                }
            }
        }
        Ok(PooledMatrix {
            n_harmonic: harmonic_mean_cells(&n_cells, &r_matrix),
            variables,
            r_matrix,
            n_cells,
            missing_pairs: missing,
        })
    }

    pub fn write_matrix_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_labelled(writer, &self.variables, &self.r_matrix)
    }

    pub fn write_n_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_labelled(writer, &self.variables, &self.n_cells)
    }
}

fn write_labelled<W: Write>(writer: W, vars: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::Domain(format!("writing CSV: {e}"));
    let mut header = vec![String::new()];
    header.extend(vars.iter().cloned());
    w.write_record(&header).map_err(to_err)?;
    for (i, v) in vars.iter().enumerate() {
        let mut row = vec![v.clone()];
        row.extend((0..vars.len()).map(|j| {
            let x = m[(i, j)];
            if x.is_nan() {
                "NA".to_string()
            } else {
                format!("{x}")
            }
        }));
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::Domain(format!("writing CSV: {e}")))
}

/// Reads a labelled square matrix (first column and header carry the names).
/// `NA` or an empty field reads as NaN.
pub fn read_labelled_matrix<R: Read>(reader: R, source: &str) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::parse(source, 1, e.to_string()))?.clone();
    let vars: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let p = vars.len();
    if p == 0 {
        return Err(Error::parse(source, 1, "no variable columns"));
    }
    let mut m = DMatrix::<f64>::zeros(p, p);
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(source, line, e.to_string()))?;
        if i >= p {
            return Err(Error::parse(source, line, "more rows than columns"));
        }
        if rec.get(0) != Some(vars[i].as_str()) {
            return Err(Error::parse(source, line, format!("row label should be {}", vars[i])));
        }
        if rec.len() != p + 1 {
            return Err(Error::parse(
                source,
                line,
                format!("expected {} fields, found {}", p + 1, rec.len()),
            ));
        }
        for j in 0..p {
            let field = &rec[j + 1];
            m[(i, j)] = if field.is_empty() || field.eq_ignore_ascii_case("NA") {
                f64::NAN
            } else {
                field
                    .parse()
                    .map_err(|_| Error::parse(source, line, format!("not a number: {field}")))?
            };
        }
        rows += 1;
    }
    if rows != p {
        return Err(Error::parse(source, rows + 2, format!("expected {p} rows, found {rows}")));
    }
    Ok((vars, m))
}

pub fn check_positive_definite(r: &DMatrix<f64>) -> PdCheck {
    if r.iter().any(|x| !x.is_finite()) {
        return PdCheck {
            min_eigenvalue: f64::NAN,
            verdict: Definiteness::NotPositiveDefinite,
        };
    }
    let min_eigenvalue = SymmetricEigen::new(r.clone()).eigenvalues.min();
    let verdict = if min_eigenvalue <= PD_TOLERANCE {
        Definiteness::NotPositiveDefinite
    } else if min_eigenvalue < NEAR_SINGULAR {
        Definiteness::NearSingular
    } else {
        Definiteness::PositiveDefinite
    };
    PdCheck { min_eigenvalue, verdict }
}

/// Clips eigenvalues at [`REPAIR_FLOOR`] and rescales back to a unit diagonal.
/// The result is a different matrix from the pooled estimates; callers must
/// say so.
pub fn repair_positive_definite(r: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(r.clone());
    let clipped = eig.eigenvalues.map(|l| l.max(REPAIR_FLOOR));
    let fixed = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let d = fixed.diagonal().map(|x| 1.0 / x.sqrt());
    let p = r.nrows();
    DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { fixed[(i, j)] * d[i] * d[j] })
}
