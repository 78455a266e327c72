//! Adaptive Simpson quadrature with interval bisection.

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_DEPTH: u32 = 50;
const MAX_EVALUATIONS: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    pub error_estimate: f64,
    pub evaluations: usize,
}

struct State<'a, F> {
    f: &'a F,
    evaluations: usize,
    error: f64,
    exhausted: bool,
    max_depth: u32,
}

/// Integrates `f` over `[a, b]` to absolute tolerance `tol`.
///
/// Reversed limits give the negated integral. Fails if some subinterval
/// still misses its share of the tolerance at `max_depth`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    tol: f64,
    max_depth: u32,
) -> Result<Quadrature> {
    if a == b {
        return Ok(Quadrature { value: 0.0, error_estimate: 0.0, evaluations: 0 });
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let fa = f(lo);
    let fb = f(hi);
    let m = 0.5 * (lo + hi);
    let fm = f(m);
    let whole = simpson(lo, hi, fa, fm, fb);
    let mut st = State { f: &f, evaluations: 3, error: 0.0, exhausted: false, max_depth };
    let value = recurse(&mut st, lo, hi, fa, fm, fb, whole, tol, 0);
    if st.exhausted || !value.is_finite() {
        return Err(Error::Quadrature { a, b, tol, estimate: st.error });
    }
    Ok(Quadrature { value: sign * value, error_estimate: st.error, evaluations: st.evaluations })
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64>(
    st: &mut State<'_, F>,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = (st.f)(lm);
    let frm = (st.f)(rm);
    st.evaluations += 2;
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        st.error += delta.abs() / 15.0;
        return left + right + delta / 15.0;
    }
    if depth >= st.max_depth || st.evaluations >= MAX_EVALUATIONS {
        st.exhausted = true;
        st.error += delta.abs() / 15.0;
        return left + right + delta / 15.0;
    }
    recurse(st, a, m, fa, flm, fm, left, 0.5 * tol, depth + 1)
        + recurse(st, m, b, fm, frm, fb, right, 0.5 * tol, depth + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exact() {
        let q = adaptive_simpson(|x| x * x * x - 2.0 * x, 0.0, 2.0, 1e-12, 50).unwrap();
        assert!((q.value - 0.0).abs() < 1e-12);
    }

    #[test]
    fn reversed_limits_negate() {
        let f = |x: f64| x.sin();
        let a = adaptive_simpson(f, 0.0, 1.0, 1e-12, 50).unwrap().value;
        let b = adaptive_simpson(f, 1.0, 0.0, 1e-12, 50).unwrap().value;
        assert_eq!(a, -b);
        assert!((a - (1.0 - 1f64.cos())).abs() < 1e-12);
    }

    #[test]
    fn singular_integrand_reports_failure() {
        let r = adaptive_simpson(|x: f64| 1.0 / x.abs().sqrt().max(1e-300), -1.0, 1.0, 1e-10, 20);
        assert!(matches!(r, Err(Error::Quadrature { .. })));
    }
}
