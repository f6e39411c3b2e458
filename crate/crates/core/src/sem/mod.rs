//! Maximum-likelihood path analysis on a pooled correlation matrix.

mod fit;
pub mod optim;
mod ram;
mod spec;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

pub use fit::{baseline_chi2, effect_matrices, fit_indices, srmr, wald_test, EffectMatrices, FitIndices, WaldTest};
pub use ram::{build_ram, RamMatrices, RamModel, SampleMoments};
pub use spec::{Equation, PathModelSpec};

use crate::error::{Error, Result};
use crate::pooledmatrix::{check_positive_definite, repair_positive_definite, Definiteness, PooledMatrix};
use crate::stats::normal_two_sided_p;
use optim::{minimize, numerical_hessian, numerical_jacobian, OptimOptions};

const NEWTON_DECREMENT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FitOptions {
    pub optim: OptimOptions,
    /// Replace a non-positive-definite input by its eigenvalue-clipped repair.
    pub pd_repair: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathEstimate {
    pub from: String,
    pub to: String,
    /// Standardized by model-implied standard deviations.
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub unstandardized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndirectPath {
    pub from: String,
    pub via: String,
    pub to: String,
    pub estimate: f64,
    /// First-order delta method on the two standardized segments.
    pub se: f64,
    pub z: f64,
    pub p: f64,
}

/// Sum of all indirect routes from one variable to another.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndirectTotal {
    pub from: String,
    pub to: String,
    pub estimate: f64,
    pub se: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Effects {
    pub matrices: EffectMatrices,
    pub paths: Vec<IndirectPath>,
    pub totals: Vec<IndirectTotal>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: String,
    pub variables: Vec<String>,
    pub n_used: f64,
    pub theta: DVector<f64>,
    /// Covariance of `theta` from the observed information.
    pub theta_cov: DMatrix<f64>,
    pub sample: DMatrix<f64>,
    pub implied: DMatrix<f64>,
    pub f_min: f64,
    pub iterations: usize,
    pub coefficients: Vec<PathEstimate>,
    pub r2: Vec<(String, f64)>,
    pub indices: FitIndices,
    pub wald: Vec<WaldTest>,
    pub effects: Effects,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn coefficient(&self, from: &str, to: &str) -> Option<&PathEstimate> {
        self.coefficients.iter().find(|c| c.from == from && c.to == to)
    }

    pub fn r_squared(&self, var: &str) -> Option<f64> {
        self.r2.iter().find(|(v, _)| v == var).map(|(_, r)| *r)
    }

    pub fn indirect_path(&self, from: &str, via: &str, to: &str) -> Option<&IndirectPath> {
        self.effects.paths.iter().find(|p| p.from == from && p.via == via && p.to == to)
    }

    pub fn indirect_total(&self, from: &str, to: &str) -> Option<&IndirectTotal> {
        self.effects.totals.iter().find(|p| p.from == from && p.to == to)
    }

    pub fn wald_for(&self, dependent: &str) -> Option<&WaldTest> {
        self.wald.iter().find(|w| w.dependent == dependent)
    }
}

/// Fits `spec` to the pooled matrix restricted to the model's variables, with
/// `N` the rounded harmonic mean over that subset.
pub fn fit(spec: &PathModelSpec, pooled: &PooledMatrix, opts: &FitOptions) -> Result<FitResult> {
    let wanted = spec.variables();
    for v in &wanted {
        if pooled.index_of(v).is_none() {
            return Err(Error::UnknownVariable(v.clone()));
        }
    }
    let ordered: Vec<String> = pooled.variables.iter().filter(|v| wanted.contains(v)).cloned().collect();
    let sub = pooled.subset(&ordered)?;
    if !sub.missing_pairs.is_empty() {
        return Err(Error::MissingPairs(sub.missing_pairs.iter().map(ToString::to_string).collect()));
    }
    let mut warnings = Vec::new();
    let check = check_positive_definite(&sub.r_matrix);
    let s = match check.verdict {
        Definiteness::NotPositiveDefinite if opts.pd_repair => {
            warnings.push(format!(
                "input matrix not positive definite (smallest eigenvalue {:.3e}); fitted to an eigenvalue-clipped repair",
                check.min_eigenvalue
            ));
            repair_positive_definite(&sub.r_matrix)
        }
        Definiteness::NotPositiveDefinite => {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: check.min_eigenvalue,
            })
        }
        Definiteness::NearSingular => {
            warnings.push(format!(
                "input matrix is near-singular (smallest eigenvalue {:.3e})",
                check.min_eigenvalue
            ));
            sub.r_matrix.clone()
        }
        Definiteness::PositiveDefinite => sub.r_matrix.clone(),
    };
    let mut result = fit_moments(spec, &ordered, s, sub.n_for_fit(), opts)?;
    result.warnings.splice(0..0, warnings);
    Ok(result)
}

/// Fits `spec` to a covariance or correlation matrix over `variables` with sample size `n`.
pub fn fit_moments(spec: &PathModelSpec, variables: &[String], s: DMatrix<f64>, n: f64, opts: &FitOptions) -> Result<FitResult> {
    let p = variables.len();
    if n.is_nan() || n < (p + 2) as f64 {
        return Err(Error::SampleTooSmall { n, p });
    }
    let ram = build_ram(spec, variables)?;
    let df = ram.degrees_of_freedom();
    if df < 0 {
        return Err(Error::Spec(format!("model has {} more parameters than moments", -df)));
    }
    let sample = SampleMoments::new(s)?;
    let start = ram.start_values(&sample)?;
    let objective = |t: &DVector<f64>| ram.f_ml(t, &sample);
    let gradient = |t: &DVector<f64>| ram.gradient(t, &sample);
    let opt = minimize(objective, gradient, start, &opts.optim)
        .ok_or_else(|| Error::Singular("implied covariance not positive definite at start values".into()))?;
    let hessian = numerical_hessian(gradient, &opt.x);
    let mut warnings = Vec::new();
    if !opt.converged {
        // On an ill-conditioned input the gradient cannot get below the
        // absolute tolerance; accept the stall point only if the Newton
        // decrement says no further decrease is attainable.
        let decrement = match (&hessian, ram.gradient(&opt.x, &sample)) {
            (Some(h), Some(g)) if opt.stalled => h.clone().cholesky().map(|c| 0.5 * g.dot(&c.solve(&g))),
            _ => None,
        };
        match decrement {
            Some(d) if d < NEWTON_DECREMENT_TOL * opt.f.abs().max(1.0) => warnings.push(format!(
                "line search stalled with max |gradient| {:.3e}; Newton decrement {d:.1e} shows the optimum is reached to working precision",
                opt.grad_norm
            )),
            _ => {
                return Err(Error::NotConverged {
                    iterations: opt.iterations,
                    f_best: opt.f,
                    grad_norm: opt.grad_norm,
                    best: opt.x.iter().copied().collect(),
                })
            }
        }
    }
    let theta = opt.x;
    let f_min = opt.f.max(0.0);

    let hessian = hessian.ok_or_else(|| Error::Singular("Hessian undefined at optimum".into()))?;
    let info = hessian * ((n - 1.0) / 2.0);
    let theta_cov = info
        .try_inverse()
        .ok_or_else(|| Error::Singular("information matrix is not invertible".into()))?;
    let theta_cov = (&theta_cov + theta_cov.transpose()) * 0.5;

    let implied = ram.implied_covariance(&theta)?;
    let standardized = |t: &DVector<f64>| -> Option<DVector<f64>> {
        let sigma = ram.implied_covariance(t).ok()?;
        let sd: Vec<f64> = (0..p).map(|i| sigma[(i, i)].sqrt()).collect();
        Some(DVector::from_iterator(
            ram.paths().len(),
            ram.paths().iter().enumerate().map(|(k, &(i, j))| t[k] * sd[j] / sd[i]),
        ))
    };
    let std_paths = standardized(&theta).ok_or_else(|| Error::Singular("implied variances undefined".into()))?;
    let jac = numerical_jacobian(standardized, &theta).ok_or_else(|| Error::Singular("implied variances undefined".into()))?;
    let std_cov = &jac * &theta_cov * jac.transpose();

    let coefficients: Vec<PathEstimate> = ram
        .paths()
        .iter()
        .enumerate()
        .map(|(k, &(i, j))| {
            let se = std_cov[(k, k)].max(0.0).sqrt();
            let z = std_paths[k] / se;
            PathEstimate {
                from: variables[j].clone(),
                to: variables[i].clone(),
                estimate: std_paths[k],
                se,
                z,
                p: normal_two_sided_p(z),
                unstandardized: theta[k],
            }
        })
        .collect();

    let r2 = ram
        .equation_paths()
        .iter()
        .map(|(dep, _)| {
            let psi = theta[ram.variance_index(*dep)];
            (variables[*dep].clone(), 1.0 - psi / implied[(*dep, *dep)])
        })
        .collect();

    let wald = ram
        .equation_paths()
        .iter()
        .map(|(dep, range)| {
            let b: Vec<f64> = range.clone().map(|k| theta[k]).collect();
            let cov = theta_cov.view((range.start, range.start), (range.len(), range.len())).into_owned();
            wald_test(&variables[*dep], &b, &cov)
        })
        .collect::<Result<Vec<_>>>()?;

    let chi2 = (n - 1.0) * f_min;
    let indices = fit_indices(
        chi2,
        df as usize,
        baseline_chi2(&sample.s, sample.ln_det, n),
        n,
        srmr(&sample.s, &implied),
        ram.n_params(),
    );

    let effects = compute_effects(&ram, variables, &std_paths, &std_cov, &theta, &theta_cov, &standardized)?;

    Ok(FitResult {
        model: spec.name().to_string(),
        variables: variables.to_vec(),
        n_used: n,
        theta,
        theta_cov,
        sample: sample.s,
        implied,
        f_min,
        iterations: opt.iterations,
        coefficients,
        r2,
        indices,
        wald,
        effects,
        warnings,
    })
}

fn path_matrix(ram: &RamModel, values: &DVector<f64>) -> DMatrix<f64> {
    let p = ram.dim();
    let mut b = DMatrix::zeros(p, p);
    for (k, &(i, j)) in ram.paths().iter().enumerate() {
        b[(i, j)] = values[k];
    }
    b
}

fn compute_effects<F>(
    ram: &RamModel,
    variables: &[String],
    std_paths: &DVector<f64>,
    std_cov: &DMatrix<f64>,
    theta: &DVector<f64>,
    theta_cov: &DMatrix<f64>,
    standardized: &F,
) -> Result<Effects>
where
    F: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    let b = path_matrix(ram, std_paths);
    let matrices = effect_matrices(&b);
    let p = ram.dim();
    let mut paths = Vec::new();
    for (ka, &(mid, from)) in ram.paths().iter().enumerate() {
        for (kb, &(to, m2)) in ram.paths().iter().enumerate() {
            if m2 != mid {
                continue;
            }
            let (a, bb) = (std_paths[ka], std_paths[kb]);
            let var = bb * bb * std_cov[(ka, ka)] + a * a * std_cov[(kb, kb)] + 2.0 * a * bb * std_cov[(ka, kb)];
            let se = var.max(0.0).sqrt();
            let z = a * bb / se;
            paths.push(IndirectPath {
                from: variables[from].clone(),
                via: variables[mid].clone(),
                to: variables[to].clone(),
                estimate: a * bb,
                se,
                z,
                p: normal_two_sided_p(z),
            });
        }
    }

    let mut totals = Vec::new();
    let pairs: Vec<(usize, usize)> = (0..p)
        .flat_map(|i| (0..p).map(move |j| (i, j)))
        .filter(|&(i, j)| matrices.indirect[(i, j)] != 0.0)
        .collect();
    if !pairs.is_empty() {
        let indirect_of = |t: &DVector<f64>| -> Option<DVector<f64>> {
            let m = effect_matrices(&path_matrix(ram, &standardized(t)?));
            Some(DVector::from_iterator(pairs.len(), pairs.iter().map(|&(i, j)| m.indirect[(i, j)])))
        };
        let jac = numerical_jacobian(indirect_of, theta).ok_or_else(|| Error::Singular("indirect effects undefined".into()))?;
        let cov = &jac * theta_cov * jac.transpose();
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let est = matrices.indirect[(i, j)];
            let se = cov[(k, k)].max(0.0).sqrt();
            totals.push(IndirectTotal {
                from: variables[j].clone(),
                to: variables[i].clone(),
                estimate: est,
                se,
                p: normal_two_sided_p(est / se),
            });
        }
    }
    Ok(Effects { matrices, paths, totals })
}
