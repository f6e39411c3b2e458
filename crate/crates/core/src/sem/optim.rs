//! BFGS with backtracking line search for smooth objectives that may be
//! undefined (`None`) outside their domain.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub max_iterations: usize,
    pub grad_tol: f64,
    pub f_rel_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iterations: 500,
            grad_tol: 1e-8,
            f_rel_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The line search found no decrease before the iteration cap.
    pub stalled: bool,
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Backtracking search along `d`; returns the accepted point and its value.
fn line_search<F>(f: &F, x: &DVector<f64>, fx: f64, g: &DVector<f64>, d: &DVector<f64>, alpha0: f64) -> Option<(DVector<f64>, f64)>
where
    F: Fn(&DVector<f64>) -> Option<f64>,
{
    let slope = g.dot(d);
    if slope >= 0.0 {
        return None;
    }
    let mut alpha = alpha0;
    for _ in 0..60 {
        let trial = x + d * alpha;
        if let Some(ft) = f(&trial) {
            if ft <= fx + 1e-4 * alpha * slope {
                return Some((trial, ft));
            }
        }
        alpha *= 0.5;
    }
    None
}

/// Converged when the gradient max-norm and the relative objective change of
/// the last step are both below tolerance. Relative change is measured
/// against `max(|F|, 1)` so a zero optimum does not blow it up.
pub fn minimize<F, G>(f: F, grad: G, x0: DVector<f64>, opts: &OptimOptions) -> Option<OptimResult>
where
    F: Fn(&DVector<f64>) -> Option<f64>,
    G: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    let n = x0.len();
    let mut x = x0;
    let mut fx = f(&x)?;
    let mut g = grad(&x)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh_h = true;

    for iter in 1..=opts.max_iterations {
        let d = -(&h * &g);
        let step = line_search(&f, &x, fx, &g, &d, 1.0).or_else(|| {
            // steepest-descent fallback
            let sd = -&g;
            let scale = 1.0 / max_abs(&g).max(1.0);
            line_search(&f, &x, fx, &g, &sd, scale)
        });
        let Some((x_new, f_new)) = step else {
            let gn = max_abs(&g);
            return Some(OptimResult {
                converged: gn < opts.grad_tol,
                stalled: gn >= opts.grad_tol,
                x,
                f: fx,
                grad_norm: gn,
                iterations: iter,
            });
        };
        let g_new = grad(&x_new)?;
        let s = &x_new - &x;
        let y = &g_new - &g;
        let rel = (fx - f_new).abs() / fx.abs().max(1.0);
        x = x_new;
        fx = f_new;
        g = g_new;

        let gn = max_abs(&g);
        if gn < opts.grad_tol && rel < opts.f_rel_tol {
            return Some(OptimResult {
                x,
                f: fx,
                grad_norm: gn,
                iterations: iter,
                converged: true,
                stalled: false,
            });
        }

        let sy = s.dot(&y);
        if sy > 1e-14 * s.norm() * y.norm() {
            if fresh_h {
                h *= sy / y.dot(&y);
                fresh_h = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        } else {
            h = DMatrix::identity(n, n);
            fresh_h = true;
        }
    }
    Some(OptimResult {
        grad_norm: max_abs(&g),
        x,
        f: fx,
        iterations: opts.max_iterations,
        converged: false,
        stalled: false,
    })
}

/// Central difference of `func` along coordinate `j`. The step shrinks when
/// a trial point leaves the domain, as happens next to a variance bound.
fn central_difference<F>(func: &F, x: &DVector<f64>, j: usize, step: f64) -> Option<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    let mut h = step * x[j].abs().max(1.0);
    for _ in 0..8 {
        let mut up = x.clone();
        let mut dn = x.clone();
        up[j] += h;
        dn[j] -= h;
        if let (Some(a), Some(b)) = (func(&up), func(&dn)) {
            return Some((a - b) / (2.0 * h));
        }
        h *= 0.1;
    }
    None
}

/// Symmetric finite-difference Hessian from an analytic gradient.
pub fn numerical_hessian<G>(grad: G, x: &DVector<f64>) -> Option<DMatrix<f64>>
where
    G: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    for j in 0..n {
        hess.set_column(j, &central_difference(&grad, x, j, 1e-5)?);
    }
    Some((&hess + hess.transpose()) * 0.5)
}

/// Central-difference Jacobian of a vector function.
pub fn numerical_jacobian<F>(func: F, x: &DVector<f64>) -> Option<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    let rows = func(x)?.len();
    let mut jac = DMatrix::zeros(rows, x.len());
    for j in 0..x.len() {
        jac.set_column(j, &central_difference(&func, x, j, 1e-6)?);
    }
    Some(jac)
}
