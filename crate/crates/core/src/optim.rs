//! Quasi-Newton minimisation and finite-difference derivatives.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Convergence on the gradient infinity norm.
    pub grad_tol: f64,
    /// Convergence on the absolute change in the objective.
    pub f_tol: f64,
    /// Upper bound on the Euclidean length of a single step.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { max_iter: 200, grad_tol: 1e-6, f_tol: 1e-12, max_step: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Central-difference gradient with a fixed absolute step.
pub fn central_gradient<F: FnMut(&DVector<f64>) -> f64>(f: &mut F, x: &DVector<f64>, step: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Central-difference Hessian from function values only.
pub fn central_hessian<F: FnMut(&DVector<f64>) -> f64>(f: &mut F, x: &DVector<f64>, step: f64) -> DMatrix<f64> {
    let k = x.len();
    let f0 = f(x);
    let mut h = DMatrix::zeros(k, k);
    let mut xp = x.clone();
    for i in 0..k {
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        h[(i, i)] = (fp - 2.0 * f0 + fm) / (step * step);
        for j in 0..i {
            let mut eval = |di: f64, dj: f64| {
                xp[i] = x[i] + di;
                xp[j] = x[j] + dj;
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (eval(step, step) - eval(step, -step) - eval(-step, step) + eval(-step, -step))
                / (4.0 * step * step);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

/// BFGS with a backtracking Armijo line search.
///
/// `fg` returns the objective and its gradient. Only descent steps are
/// accepted, so the returned value never exceeds `fg(x0)`.
pub fn bfgs<F>(mut fg: F, x0: DVector<f64>, opts: &BfgsOptions) -> Result<Minimum>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let k = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = fg(&x);
    if !fx.is_finite() {
        return Err(Error::Optimizer("objective not finite at the starting point".into()));
    }
    let mut hinv = DMatrix::<f64>::identity(k, k);
    let mut first = true;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        if g.amax() < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut dir = -(&hinv * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(k, k);
            dir = -g.clone();
            slope = g.dot(&dir);
        }
        let len = dir.norm();
        if len > opts.max_step {
            dir *= opts.max_step / len;
            slope *= opts.max_step / len;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn = &x + t * &dir;
            let (fxn, gn) = fg(&xn);
            if fxn.is_finite() && fxn <= fx + 1e-4 * t * slope {
                accepted = Some((xn, fxn, gn));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fxn, gn)) = accepted else {
            // No decrease along a descent direction: stationary to working precision.
            converged = g.amax() < opts.grad_tol.sqrt();
            break;
        };

        let s = &xn - &x;
        let yv = &gn - &g;
        let sy = s.dot(&yv);
        let df = fx - fxn;
        x = xn;
        fx = fxn;
        g = gn;
        if sy > 1e-12 * s.norm() * yv.norm() {
            if first {
                hinv = DMatrix::identity(k, k) * (sy / yv.dot(&yv));
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &yv;
            let yhy = yv.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        if df.abs() < opts.f_tol * (1.0 + fx.abs()) && g.amax() < opts.grad_tol.sqrt() {
            converged = true;
            break;
        }
    }
    Ok(Minimum { x, value: fx, gradient: g, iterations, converged })
}

/// BFGS on an objective without an analytic gradient.
pub fn bfgs_numeric<F>(mut f: F, x0: DVector<f64>, step: f64, opts: &BfgsOptions) -> Result<Minimum>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    bfgs(
        |x| {
            let v = f(x);
            let g = central_gradient(&mut f, x, step);
            (v, g)
        },
        x0,
        opts,
    )
}
