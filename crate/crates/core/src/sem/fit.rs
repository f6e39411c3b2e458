use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::stats::chi_square_sf;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitIndices {
    pub chi2: f64,
    pub df: usize,
    /// `None` for saturated models, likewise CFI, TLI and RMSEA.
    pub p_chi2: Option<f64>,
    pub cfi: Option<f64>,
    pub tli: Option<f64>,
    pub rmsea: Option<f64>,
    pub srmr: f64,
    pub aic: f64,
    pub bic: f64,
    pub baseline_chi2: f64,
    pub baseline_df: usize,
    pub n_params: usize,
}

impl FitIndices {
    pub fn saturated(&self) -> bool {
        self.df == 0
    }
}

/// χ² of the independence model (free variances, no covariances).
pub fn baseline_chi2(s: &DMatrix<f64>, ln_det_s: f64, n: f64) -> (f64, usize) {
    let p = s.nrows();
    let f_b: f64 = (0..p).map(|i| s[(i, i)].ln()).sum::<f64>() - ln_det_s;
    ((n - 1.0) * f_b, p * (p - 1) / 2)
}

/// Standardized root mean square residual over the lower triangle, diagonal included.
pub fn srmr(s: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    let p = s.nrows();
    let mut sum = 0.0;
    for i in 0..p {
        for j in 0..=i {
            let r = (s[(i, j)] - sigma[(i, j)]) / (s[(i, i)] * s[(j, j)]).sqrt();
            sum += r * r;
        }
    }
    (sum / (p * (p + 1) / 2) as f64).sqrt()
}

pub fn fit_indices(chi2: f64, df: usize, baseline: (f64, usize), n: f64, srmr: f64, n_params: usize) -> FitIndices {
    let (chi2_b, df_b) = baseline;
    let q = n_params as f64;
    let (p_chi2, cfi, tli, rmsea) = if df == 0 {
        (None, None, None, None)
    } else {
        let d = df as f64;
        let excess = (chi2 - d).max(0.0);
        let denom = (chi2_b - df_b as f64).max(chi2 - d).max(0.0);
        let cfi = if denom > 0.0 { 1.0 - excess / denom } else { 1.0 };
        let ratio_b = chi2_b / df_b as f64;
        let tli = (df_b > 0 && ratio_b != 1.0).then(|| (ratio_b - chi2 / d) / (ratio_b - 1.0));
        let rmsea = (excess / (d * (n - 1.0))).sqrt();
        (Some(chi_square_sf(chi2, d)), Some(cfi), tli, Some(rmsea))
    };
    FitIndices {
        chi2,
        df,
        p_chi2,
        cfi,
        tli,
        rmsea,
        srmr,
        aic: chi2 + 2.0 * q,
        bic: chi2 + q * n.ln(),
        baseline_chi2: chi2_b,
        baseline_df: df_b,
        n_params,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaldTest {
    pub dependent: String,
    pub statistic: f64,
    pub df: usize,
    pub p: f64,
}

/// `W = bᵀ V⁻¹ b` on the coefficients of one equation.
pub fn wald_test(dependent: &str, b: &[f64], cov: &DMatrix<f64>) -> Result<WaldTest> {
    let k = b.len();
    let bv = nalgebra::DVector::from_column_slice(b);
    let inv = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("coefficient covariance of {dependent} is not invertible")))?
        .inverse();
    let w = bv.dot(&(&inv * &bv));
    Ok(WaldTest {
        dependent: dependent.to_string(),
        statistic: w,
        df: k,
        p: chi_square_sf(w, k as f64),
    })
}

/// Direct, indirect and total effects for a recursive path matrix `b`
/// (entry `[i, j]` is the effect of `j` on `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct EffectMatrices {
    pub direct: DMatrix<f64>,
    pub indirect: DMatrix<f64>,
    pub total: DMatrix<f64>,
}

/// Indirect effects are the sum of powers `B² + B³ + …`, which terminates
/// because `B` is nilpotent; total is formed as `direct + indirect`.
pub fn effect_matrices(b: &DMatrix<f64>) -> EffectMatrices {
    let p = b.nrows();
    let mut indirect = DMatrix::zeros(p, p);
    let mut power = b * b;
    for _ in 2..=p {
        if power.iter().all(|x| *x == 0.0) {
            break;
        }
        indirect += &power;
        power = &power * b;
    }
    let total = b + &indirect;
    EffectMatrices {
        direct: b.clone(),
        indirect,
        total,
    }
}
