use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::spec::PathModelSpec;
use crate::error::{Error, Result};

/// A: entry `[i, j]` is the path `j → i`. S: exogenous covariances and
/// residual variances.
#[derive(Debug, Clone, PartialEq)]
pub struct RamMatrices {
    pub a: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

/// Free-parameter layout of a path model: paths, then exogenous covariances,
/// then one variance per variable.
#[derive(Debug, Clone, PartialEq)]
pub struct RamModel {
    variables: Vec<String>,
    /// `(dependent, predictor)` index pairs, in equation order.
    paths: Vec<(usize, usize)>,
    /// `(i, j)` with `i > j`, both exogenous.
    covariances: Vec<(usize, usize)>,
    endogenous: Vec<bool>,
    /// Index range of each equation's paths within the parameter vector.
    equation_paths: Vec<(usize, std::ops::Range<usize>)>,
}

pub fn build_ram(spec: &PathModelSpec, variables: &[String]) -> Result<RamModel> {
    let index = |v: &str| {
        variables
            .iter()
            .position(|x| x == v)
            .ok_or_else(|| Error::UnknownVariable(v.to_string()))
    };
    let p = variables.len();
    let mut endogenous = vec![false; p];
    let mut paths = Vec::new();
    let mut equation_paths = Vec::new();
    for eq in spec.equations() {
        let dep = index(&eq.dependent)?;
        endogenous[dep] = true;
        let start = paths.len();
        for pred in &eq.predictors {
            paths.push((dep, index(pred)?));
        }
        equation_paths.push((dep, start..paths.len()));
    }
    let mut covariances = Vec::new();
    for i in 0..p {
        for j in 0..i {
            if !endogenous[i] && !endogenous[j] {
                covariances.push((i, j));
            }
        }
    }
    Ok(RamModel {
        variables: variables.to_vec(),
        paths,
        covariances,
        endogenous,
        equation_paths,
    })
}

impl RamModel {
    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn dim(&self) -> usize {
        self.variables.len()
    }

    pub fn paths(&self) -> &[(usize, usize)] {
        &self.paths
    }

    pub fn covariances(&self) -> &[(usize, usize)] {
        &self.covariances
    }

    pub fn is_endogenous(&self, i: usize) -> bool {
        self.endogenous[i]
    }

    pub fn equation_paths(&self) -> &[(usize, std::ops::Range<usize>)] {
        &self.equation_paths
    }

    pub fn n_params(&self) -> usize {
        self.paths.len() + self.covariances.len() + self.dim()
    }

    /// Parameter index of the variance of variable `i`.
    pub fn variance_index(&self, i: usize) -> usize {
        self.paths.len() + self.covariances.len() + i
    }

    /// Distinct moments minus free parameters.
    pub fn degrees_of_freedom(&self) -> i64 {
        let p = self.dim() as i64;
        p * (p + 1) / 2 - self.n_params() as i64
    }

    pub fn matrices(&self, theta: &DVector<f64>) -> RamMatrices {
        let p = self.dim();
        let mut a = DMatrix::zeros(p, p);
        let mut s = DMatrix::zeros(p, p);
        for (k, &(i, j)) in self.paths.iter().enumerate() {
            a[(i, j)] = theta[k];
        }
        let off = self.paths.len();
        for (k, &(i, j)) in self.covariances.iter().enumerate() {
            s[(i, j)] = theta[off + k];
            s[(j, i)] = theta[off + k];
        }
        for i in 0..p {
            s[(i, i)] = theta[self.variance_index(i)];
        }
        RamMatrices { a, s }
    }

    fn filter_inverse(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let p = self.dim();
        (DMatrix::identity(p, p) - a)
            .try_inverse()
            .ok_or_else(|| Error::Singular("I − A is not invertible".into()))
    }

    /// Σ = (I−A)⁻¹ S (I−A)⁻ᵀ.
    pub fn implied_covariance(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let m = self.matrices(theta);
        let e = self.filter_inverse(&m.a)?;
        Ok(symmetrize(&e * &m.s * e.transpose()))
    }

    /// ML discrepancy; `None` where Σ is not positive definite.
    pub fn f_ml(&self, theta: &DVector<f64>, sample: &SampleMoments) -> Option<f64> {
        let sigma = self.implied_covariance(theta).ok()?;
        let chol = Cholesky::new(sigma)?;
        let ln_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let trace = (chol.inverse() * &sample.s).trace();
        Some(ln_det + trace - sample.ln_det - self.dim() as f64)
    }

    /// Analytic gradient of [`RamModel::f_ml`].
    pub fn gradient(&self, theta: &DVector<f64>, sample: &SampleMoments) -> Option<DVector<f64>> {
        let m = self.matrices(theta);
        let e = self.filter_inverse(&m.a).ok()?;
        let sigma = symmetrize(&e * &m.s * e.transpose());
        let sigma_inv = Cholesky::new(sigma.clone())?.inverse();
        let mm = &sigma_inv * (&sigma - &sample.s) * &sigma_inv;
        let dpath = 2.0 * &sigma * &mm * &e;
        let dcov = e.transpose() * &mm * &e;

        let mut g = DVector::zeros(self.n_params());
        for (k, &(i, j)) in self.paths.iter().enumerate() {
            g[k] = dpath[(j, i)];
        }
        let off = self.paths.len();
        for (k, &(i, j)) in self.covariances.iter().enumerate() {
            g[off + k] = 2.0 * dcov[(i, j)];
        }
        for i in 0..self.dim() {
            g[self.variance_index(i)] = dcov[(i, i)];
        }
        Some(g)
    }

    /// Per-equation least squares on the sample moments. For recursive models
    /// with free exogenous covariances this is already the ML solution of the
    /// saturated part.
    pub fn start_values(&self, sample: &SampleMoments) -> Result<DVector<f64>> {
        let s = &sample.s;
        let mut theta = DVector::zeros(self.n_params());
        for (dep, range) in &self.equation_paths {
            let preds: Vec<usize> = self.paths[range.clone()].iter().map(|&(_, j)| j).collect();
            let sxx = DMatrix::from_fn(preds.len(), preds.len(), |a, b| s[(preds[a], preds[b])]);
            let sxy = DVector::from_fn(preds.len(), |a, _| s[(preds[a], *dep)]);
            let b = sxx
                .cholesky()
                .ok_or_else(|| Error::Singular(format!("predictors of {} are collinear", self.variables[*dep])))?
                .solve(&sxy);
            for (k, idx) in range.clone().enumerate() {
                theta[idx] = b[k];
            }
            let resid = s[(*dep, *dep)] - b.dot(&sxy);
            theta[self.variance_index(*dep)] = resid.max(1e-3 * s[(*dep, *dep)]);
        }
        let off = self.paths.len();
        for (k, &(i, j)) in self.covariances.iter().enumerate() {
            theta[off + k] = s[(i, j)];
        }
        for i in 0..self.dim() {
            if !self.endogenous[i] {
                theta[self.variance_index(i)] = s[(i, i)];
            }
        }
        Ok(theta)
    }
}

/// Observed covariance (or correlation) matrix with its log-determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMoments {
    pub s: DMatrix<f64>,
    pub ln_det: f64,
}

impl SampleMoments {
    pub fn new(s: DMatrix<f64>) -> Result<Self> {
        let chol: Cholesky<f64, Dyn> = Cholesky::new(s.clone()).ok_or(Error::NotPositiveDefinite {
            min_eigenvalue: s.clone().symmetric_eigenvalues().min(),
        })?;
        let ln_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(SampleMoments { s, ln_det })
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}
