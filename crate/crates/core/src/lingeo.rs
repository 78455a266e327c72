//! Closed-form machinery for the linear geostatistical model
//! `Y = Dβ + S + Z`, `Z ~ N(0, τ² I)`.
//!
//! Conditional on `y`, `S ~ N(ξ, Ω)` with
//! `ξ = Σ(Σ + τ²I)⁻¹(y − Dβ)` and `Ω = Σ − Σ(Σ + τ²I)⁻¹Σ`, so the
//! expected total variation is
//! `(y − Dβ)ᵀ(y − Dβ) + ξᵀ[ξ − 2(y − Dβ)] + tr(Ω)`.
//! Every solve goes through one Cholesky factor of `Σ + τ²I`.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::glm::baseline_variation;
use crate::gpcov::{build_cov, correlation_matrix, log_det_from_factor, CovParams};
use crate::optim::{bfgs_numeric, BfgsOptions};

#[derive(Debug, Clone)]
pub struct LinearPosterior {
    /// Posterior mean of `S`.
    pub xi: DVector<f64>,
    /// Posterior covariance of `S`.
    pub omega: DMatrix<f64>,
    pub residual_ss: f64,
    pub trace_omega: f64,
    pub expected_total_variation: f64,
    /// `‖y − Dβ − ξ‖² + tr(Ω)`, the same quantity by a second algebraic route.
    pub expected_total_variation_alt: f64,
}

fn check_linear(data: &Dataset, beta: &[f64], cov: &CovParams) -> Result<()> {
    cov.validate()?;
    if !(cov.tau2 > 0.0) {
        return Err(Error::InvalidParams("the linear model needs a positive nugget tau2".into()));
    }
    if beta.len() != data.p() {
        return Err(Error::Mismatch(format!("{} coefficients for {} design columns", beta.len(), data.p())));
    }
    if data.trials.iter().any(|&m| m != 1) {
        return Err(Error::InvalidData("the linear model requires m_i = 1".into()));
    }
    Ok(())
}

fn residuals(data: &Dataset, beta: &[f64]) -> DVector<f64> {
    let b = DVector::from_column_slice(beta);
    DVector::from_column_slice(&data.y) - &data.design * b
}

pub fn linear_posterior(data: &Dataset, beta: &[f64], cov: &CovParams) -> Result<LinearPosterior> {
    check_linear(data, beta, cov)?;
    let n = data.n();
    let sigma = build_cov(&data.coords, cov)?.sigma;
    let mut v = sigma.clone();
    for i in 0..n {
        v[(i, i)] += cov.tau2;
    }
    let chol = v
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Sigma + tau2 I".into()))?;
    let r = residuals(data, beta);
    let xi = &sigma * chol.solve(&r);
    let l = chol.l();
    let m = l.solve_lower_triangular(&sigma).expect("non-singular factor");
    let mut omega = &sigma - m.transpose() * &m;
    omega = (&omega + omega.transpose()) * 0.5;

    let residual_ss = r.dot(&r);
    let trace_omega = omega.trace();
    let expected_total_variation = residual_ss + xi.dot(&(&xi - &r * 2.0)) + trace_omega;
    let shifted = &r - &xi;
    let expected_total_variation_alt = shifted.dot(&shifted) + trace_omega;
    Ok(LinearPosterior {
        xi,
        omega,
        residual_ss,
        trace_omega,
        expected_total_variation,
        expected_total_variation_alt,
    })
}

/// Exact R² of the linear geostatistical model at given parameters.
pub fn r2_linear_glgm(data: &Dataset, beta: &[f64], cov: &CovParams) -> Result<f64> {
    let post = linear_posterior(data, beta, cov)?;
    let denom = baseline_variation(data, &Family::gaussian())?;
    Ok(1.0 - post.expected_total_variation / denom)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub beta: Vec<f64>,
    pub cov: CovParams,
    pub log_likelihood: f64,
    pub converged: bool,
}

struct Profile {
    beta: DVector<f64>,
    sigma2: f64,
    log_likelihood: f64,
}

/// Profile likelihood at range `phi` and noise ratio `nu = τ²/σ²`.
fn profile(data: &Dataset, corr: &DMatrix<f64>, nu: f64) -> Option<Profile> {
    let n = data.n();
    let mut v = corr.clone();
    for i in 0..n {
        v[(i, i)] += nu;
    }
    let chol = v.cholesky()?;
    let y = DVector::from_column_slice(&data.y);
    let vinv_d = chol.solve(&data.design);
    let vinv_y = chol.solve(&y);
    let xtvx = data.design.transpose() * &vinv_d;
    let xtvy = data.design.transpose() * &vinv_y;
    let beta = xtvx.cholesky()?.solve(&xtvy);
    let r = &y - &data.design * &beta;
    let q = r.dot(&chol.solve(&r));
    let sigma2 = q / n as f64;
    if !(sigma2 > 0.0) {
        return None;
    }
    let log_det = log_det_from_factor(&chol.l());
    let nf = n as f64;
    let log_likelihood = -0.5 * nf * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0) - 0.5 * log_det;
    Some(Profile { beta, sigma2, log_likelihood })
}

/// Exact maximum likelihood for `(β, σ², φ, τ²)` by profiling out `β` and `σ²`.
///
/// A coarse grid over `(log φ, log τ²/σ²)` seeds a quasi-Newton refinement.
pub fn fit_linear_ml(data: &Dataset) -> Result<LinearFit> {
    data.check_fit_ready(&Family::gaussian())?;
    if data.trials.iter().any(|&m| m != 1) {
        return Err(Error::InvalidData("the linear model requires m_i = 1".into()));
    }
    let dist = crate::gpcov::distance_matrix(&data.coords);
    let max_d = dist.amax();
    let eval = |theta: &DVector<f64>| -> Option<Profile> {
        let phi = theta[0].exp();
        let nu = theta[1].exp();
        let corr = dist.map(|d| (-d / phi).exp());
        profile(data, &corr, nu)
    };

    let mut best: Option<(f64, DVector<f64>)> = None;
    for i in 0..12 {
        let phi = max_d * 10f64.powf(-2.5 + 2.5 * i as f64 / 11.0);
        for j in 0..12 {
            let nu = 10f64.powf(-3.0 + 5.0 * j as f64 / 11.0);
            let theta = DVector::from_vec(vec![phi.ln(), nu.ln()]);
            if let Some(p) = eval(&theta) {
                if best.as_ref().is_none_or(|(ll, _)| p.log_likelihood > *ll) {
                    best = Some((p.log_likelihood, theta));
                }
            }
        }
    }
    let (_, start) = best.ok_or_else(|| Error::Optimizer("profile likelihood undefined on the grid".into()))?;
    let opts = BfgsOptions { max_iter: 200, grad_tol: 1e-6, ..Default::default() };
    let min = bfgs_numeric(
        |t| eval(t).map(|p| -p.log_likelihood).unwrap_or(f64::INFINITY),
        start,
        1e-5,
        &opts,
    )?;
    let p = eval(&min.x).ok_or_else(|| Error::Optimizer("profile likelihood undefined at optimum".into()))?;
    let phi = min.x[0].exp();
    let nu = min.x[1].exp();
    Ok(LinearFit {
        beta: p.beta.iter().copied().collect(),
        cov: CovParams::new(p.sigma2, phi, nu * p.sigma2)?,
        log_likelihood: p.log_likelihood,
        converged: min.converged,
    })
}

/// Full (non-profiled) gaussian log-likelihood; used to check the fit.
pub fn linear_log_likelihood(data: &Dataset, beta: &[f64], cov: &CovParams) -> Result<f64> {
    check_linear(data, beta, cov)?;
    let n = data.n();
    let mut v = correlation_matrix(&data.coords, cov.phi) * cov.sigma2;
    for i in 0..n {
        v[(i, i)] += cov.tau2;
    }
    let chol = v.cholesky().ok_or_else(|| Error::NotPositiveDefinite("Sigma + tau2 I".into()))?;
    let r = residuals(data, beta);
    let q = r.dot(&chol.solve(&r));
    Ok(-0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det_from_factor(&chol.l()) + q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{fit_glm, r2_glm};
    use crate::gpcov::gp_sample_with;
    use crate::sim::test_support::simulate_linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn vanishing_field_reduces_to_rss() {
        let (data, beta, _) = simulate_linear(25, 1.0, 0.3, 0.5, 4);
        let cov = CovParams::new(1e-14, 0.3, 0.5).unwrap();
        let post = linear_posterior(&data, &beta, &cov).unwrap();
        assert!(post.xi.amax() < 1e-10);
        assert!(post.omega.amax() < 1e-10);
        assert!((post.expected_total_variation - post.residual_ss).abs() < 1e-9);
    }

    #[test]
    fn uninformative_data_leave_prior() {
        let (data, beta, _) = simulate_linear(20, 1.0, 0.3, 0.5, 5);
        let cov = CovParams::new(1.0, 0.3, 1e12).unwrap();
        let post = linear_posterior(&data, &beta, &cov).unwrap();
        let sigma = build_cov(&data.coords, &cov).unwrap().sigma;
        assert!(post.xi.amax() < 1e-9);
        assert!((&post.omega - &sigma).amax() < 1e-9);
        let expected = post.residual_ss + sigma.trace();
        assert!((post.expected_total_variation - expected).abs() < 1e-6);
    }

    #[test]
    fn two_routes_agree_and_omega_is_bounded() {
        let (data, beta, cov) = simulate_linear(40, 0.8, 0.25, 0.3, 6);
        let post = linear_posterior(&data, &beta, &cov).unwrap();
        assert!((post.expected_total_variation - post.expected_total_variation_alt).abs() < 1e-8);
        let eig = post.omega.clone().symmetric_eigenvalues();
        assert!(eig.min() > -1e-10 && eig.max() <= cov.sigma2 + 1e-10, "{eig}");
    }

    #[test]
    fn shift_invariance() {
        let (data, beta, cov) = simulate_linear(30, 0.8, 0.25, 0.3, 7);
        let a = linear_posterior(&data, &beta, &cov).unwrap();
        let mut shifted = data.clone();
        shifted.y.iter_mut().for_each(|y| *y += 5.0);
        let mut beta2 = beta.clone();
        beta2[0] += 5.0;
        let b = linear_posterior(&shifted, &beta2, &cov).unwrap();
        assert!((&a.xi - &b.xi).amax() < 1e-10);
        assert!((&a.omega - &b.omega).amax() < 1e-10);
        assert!((a.expected_total_variation - b.expected_total_variation).abs() < 1e-10);
    }

    #[test]
    fn rejects_missing_nugget() {
        let (data, beta, _) = simulate_linear(10, 1.0, 0.3, 0.5, 8);
        let cov = CovParams::new(1.0, 0.3, 0.0).unwrap();
        assert!(matches!(linear_posterior(&data, &beta, &cov), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn matches_exact_posterior_monte_carlo() {
        let (data, beta, cov) = simulate_linear(30, 1.0, 0.3, 0.4, 9);
        let post = linear_posterior(&data, &beta, &cov).unwrap();
        // Oracle: Gaussian conditioning with an explicit inverse, then sampling.
        let n = data.n();
        let sigma = build_cov(&data.coords, &cov).unwrap().sigma;
        let mut v = sigma.clone();
        for i in 0..n {
            v[(i, i)] += cov.tau2;
        }
        let vinv = v.try_inverse().unwrap();
        let r = residuals(&data, &beta);
        let mean = &sigma * &vinv * &r;
        let c = &sigma - &sigma * &vinv * &sigma;
        let c = (&c + c.transpose()) * 0.5;
        let chol = crate::gpcov::CovMatrix {
            chol: crate::gpcov::cholesky_jittered(&c, 1.0).unwrap().0.l(),
            sigma: c,
            log_det: 0.0,
            jitter: 0.0,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let draws = 100_000;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..draws {
            let s = &mean + gp_sample_with(&chol, &mut rng);
            let t = (&r - s).norm_squared();
            sum += t;
            sum2 += t * t;
        }
        let m = sum / draws as f64;
        let se = ((sum2 / draws as f64 - m * m) / draws as f64).sqrt();
        assert!((post.expected_total_variation - m).abs() < 3.0 * se, "{} vs {m} ± {se}", post.expected_total_variation);
    }

    #[test]
    fn reduces_to_ols_r2() {
        let (data, _, _) = simulate_linear(30, 1.0, 0.3, 0.4, 10);
        let fit = fit_glm(&data, &Family::gaussian()).unwrap();
        let ols = r2_glm(&data, &Family::gaussian(), &fit).unwrap();
        let r2 = r2_linear_glgm(&data, &fit.beta, &CovParams::new(1e-14, 0.3, 1.0).unwrap()).unwrap();
        assert!((r2 - ols).abs() < 1e-8);
        let ybar = data.y.iter().sum::<f64>() / data.n() as f64;
        let mut b0 = vec![0.0; data.p()];
        b0[0] = ybar;
        let r0 = r2_linear_glgm(&data.intercept_only(), &b0[..1], &CovParams::new(1e-14, 0.3, 1.0).unwrap()).unwrap();
        assert!(r0.abs() < 1e-10);
    }

    #[test]
    fn exact_ml_is_a_local_maximum() {
        let (data, _, _) = simulate_linear(60, 1.0, 0.2, 0.3, 12);
        let fit = fit_linear_ml(&data).unwrap();
        let ll = linear_log_likelihood(&data, &fit.beta, &fit.cov).unwrap();
        assert!((ll - fit.log_likelihood).abs() < 1e-8);
        for (ds, dp, dt) in [(1.05, 1.0, 1.0), (0.95, 1.0, 1.0), (1.0, 1.05, 1.0), (1.0, 0.95, 1.0), (1.0, 1.0, 1.05), (1.0, 1.0, 0.95)] {
            let c = CovParams::new(fit.cov.sigma2 * ds, fit.cov.phi * dp, fit.cov.tau2 * dt).unwrap();
            assert!(linear_log_likelihood(&data, &fit.beta, &c).unwrap() <= ll + 1e-9);
        }
        let mut b = fit.beta.clone();
        b[1] += 0.01;
        assert!(linear_log_likelihood(&data, &b, &fit.cov).unwrap() < ll);
    }
}
