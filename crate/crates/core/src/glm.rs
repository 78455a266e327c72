//! Classical GLM fitting by IRLS and the GLM coefficient of determination.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expfam::{Family, FamilyKind, Link};

const MAX_ITER: usize = 100;
const DEVIANCE_TOL: f64 = 1e-10;
const SCORE_TOL: f64 = 1e-8;
/// |η̂| beyond this flags (quasi-)separation for binomial fits.
pub const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub beta: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Fitted means on the family's mean scale (proportions for binomial).
    pub fitted_means: Vec<f64>,
    pub linear_predictor: Vec<f64>,
    /// Residual variance for gaussian fits, 1 otherwise.
    pub dispersion: f64,
    pub deviance: f64,
    pub converged: bool,
    pub iterations: usize,
    pub separation_warning: bool,
}

fn prior_weights(data: &Dataset, family: &Family) -> Vec<f64> {
    match family.kind() {
        FamilyKind::Binomial => data.trials.iter().map(|&m| m as f64).collect(),
        _ => vec![1.0; data.n()],
    }
}

fn clamp_to_link(link: Link, mu: f64) -> f64 {
    match link {
        Link::Identity => mu,
        Link::Logit => mu.clamp(1e-3, 1.0 - 1e-3),
        Link::Log => mu.max(1e-3),
    }
}

fn deviance(family: &Family, y: &[f64], mu: &[f64], w: &[f64]) -> f64 {
    let xlogy = |x: f64, z: f64| if x == 0.0 { 0.0 } else { x * (x / z).ln() };
    y.iter()
        .zip(mu)
        .zip(w)
        .map(|((&y, &mu), &w)| match family.kind() {
            FamilyKind::Gaussian => w * (y - mu) * (y - mu),
            FamilyKind::Binomial => 2.0 * w * (xlogy(y, mu) + xlogy(1.0 - y, 1.0 - mu)),
            FamilyKind::Poisson => 2.0 * w * (xlogy(y, mu) - (y - mu)),
            // Pearson statistic stands in for the quasi-deviance.
            FamilyKind::Quasi => w * (y - mu) * (y - mu) / family.variance(mu).max(f64::MIN_POSITIVE),
        })
        .sum()
}

/// Fits a GLM by iteratively reweighted least squares.
///
/// Converges when the relative deviance change drops below 1e-10 and the
/// score is below 1e-8 in every coordinate; fails after 100 iterations.
pub fn fit_glm(data: &Dataset, family: &Family) -> Result<GlmFit> {
    data.check_fit_ready(family)?;
    let n = data.n();
    let p = data.p();
    let link = family.link();
    let y = data.observed_means(family);
    let w0 = prior_weights(data, family);
    let wsum: f64 = w0.iter().sum();
    let ybar = y.iter().zip(&w0).map(|(y, w)| y * w).sum::<f64>() / wsum;

    let mut eta: Vec<f64> =
        y.iter().map(|&yi| link.apply(clamp_to_link(link, 0.5 * (yi + ybar)))).collect();
    let mut mu: Vec<f64> = eta.iter().map(|&e| link.invert(e)).collect();
    let mut dev = deviance(family, &y, &mu, &w0);
    let mut beta = DVector::zeros(p);
    let mut polished = false;

    for iter in 1..=MAX_ITER {
        let mut wx = DMatrix::zeros(n, p);
        let mut wz = DVector::zeros(n);
        for i in 0..n {
            let d = link.mu_eta(eta[i]);
            let v = family.variance(mu[i]).max(1e-300);
            let w = (w0[i] * d * d / v).max(1e-300);
            let z = eta[i] + (y[i] - mu[i]) / d;
            let sw = w.sqrt();
            for j in 0..p {
                wx[(i, j)] = sw * data.design[(i, j)];
            }
            wz[i] = sw * z;
        }
        let qr = wx.clone().qr();
        let rhs = qr.q().transpose() * &wz;
        let r = qr.r();
        let mut beta_new = r
            .solve_upper_triangular(&rhs)
            .ok_or_else(|| Error::InvalidData("design matrix is rank deficient".into()))?;
        let xtwx = wx.transpose() * &wx;

        // Step halving guards against deviance increases away from the start.
        let mut eta_new: Vec<f64> = (&data.design * &beta_new).iter().copied().collect();
        let mut mu_new: Vec<f64> = eta_new.iter().map(|&e| link.invert(e)).collect();
        let mut dev_new = deviance(family, &y, &mu_new, &w0);
        let mut halvings = 0;
        while iter > 1 && !(dev_new <= dev * (1.0 + 1e-12) + 1e-300) && halvings < 30 {
            beta_new = (&beta_new + &beta) * 0.5;
            eta_new = (&data.design * &beta_new).iter().copied().collect();
            mu_new = eta_new.iter().map(|&e| link.invert(e)).collect();
            dev_new = deviance(family, &y, &mu_new, &w0);
            halvings += 1;
        }

        let rel = (dev_new - dev).abs() / (dev_new.abs() + 0.1);
        beta = beta_new;
        eta = eta_new;
        mu = mu_new;
        dev = dev_new;

        let score = score(data, family, &y, &w0, &eta, &mu);
        if rel < DEVIANCE_TOL && score < SCORE_TOL {
            // one extra step after the criteria first hold
            if polished {
                return Ok(finish(data, family, beta, eta, mu, dev, &xtwx, iter));
            }
            polished = true;
        }
    }
    let s = score(data, family, &y, &w0, &eta, &mu);
    Err(Error::NonConvergence { what: "IRLS", iterations: MAX_ITER, detail: format!("max |score| = {s:e}") })
}

fn score(data: &Dataset, family: &Family, y: &[f64], w0: &[f64], eta: &[f64], mu: &[f64]) -> f64 {
    let link = family.link();
    let mut s = vec![0.0; data.p()];
    for i in 0..data.n() {
        let v = family.variance(mu[i]).max(1e-300);
        let u = w0[i] * (y[i] - mu[i]) * link.mu_eta(eta[i]) / v;
        for (j, sj) in s.iter_mut().enumerate() {
            *sj += u * data.design[(i, j)];
        }
    }
    s.iter().fold(0.0, |a, b| a.max(b.abs()))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    data: &Dataset,
    family: &Family,
    beta: DVector<f64>,
    eta: Vec<f64>,
    mu: Vec<f64>,
    dev: f64,
    xtwx: &DMatrix<f64>,
    iterations: usize,
) -> GlmFit {
    let n = data.n();
    let p = data.p();
    let dispersion = match family.kind() {
        FamilyKind::Gaussian if n > p => dev / (n - p) as f64,
        _ => 1.0,
    };
    let std_errors = match xtwx.clone().cholesky() {
        Some(c) => {
            let inv = c.inverse();
            (0..p).map(|j| (dispersion * inv[(j, j)]).sqrt()).collect()
        }
        None => vec![f64::NAN; p],
    };
    let separation_warning =
        family.kind() == FamilyKind::Binomial && eta.iter().any(|e| e.abs() > SEPARATION_ETA);
    GlmFit {
        beta: beta.iter().copied().collect(),
        std_errors,
        fitted_means: mu,
        linear_predictor: eta,
        dispersion,
        deviance: dev,
        converged: true,
        iterations,
        separation_warning,
    }
}

/// Fitted mean of the intercept-only GLM (constant over sites).
pub fn baseline_prediction(data: &Dataset, family: &Family) -> Result<f64> {
    Ok(fit_glm(&data.intercept_only(), family)?.fitted_means[0])
}

/// Sum of `c_V(observed_i, predicted_i)`.
pub fn total_cv(family: &Family, observed: &[f64], predicted: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (&y, &mu) in observed.iter().zip(predicted) {
        total += family.cv(y, mu)?;
    }
    Ok(total)
}

/// Sum of `c_V(observed_i, ŷ₀)`; the denominator of every R² here.
pub fn baseline_variation(data: &Dataset, family: &Family) -> Result<f64> {
    let obs = data.observed_means(family);
    if obs.iter().all(|&v| v == obs[0]) {
        return Err(Error::UndefinedR2);
    }
    let y0 = baseline_prediction(data, family)?;
    let mut total = 0.0;
    for &y in &obs {
        total += family.cv(y, y0)?;
    }
    if !(total > 0.0) {
        return Err(Error::UndefinedR2);
    }
    Ok(total)
}

/// Zhang's R² for a fitted GLM. May be negative for pathological fits.
pub fn r2_glm(data: &Dataset, family: &Family, fit: &GlmFit) -> Result<f64> {
    if fit.fitted_means.len() != data.n() {
        return Err(Error::Mismatch(format!(
            "fit has {} fitted means, dataset has {} sites",
            fit.fitted_means.len(),
            data.n()
        )));
    }
    let denom = baseline_variation(data, family)?;
    let num = total_cv(family, &data.observed_means(family), &fit.fitted_means)?;
    Ok(1.0 - num / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::test_support::simulate_logistic;
    use proptest::prelude::*;

    fn line(n: usize) -> Vec<[f64; 2]> {
        (0..n).map(|i| [i as f64, (i * i % 7) as f64]).collect()
    }

    #[test]
    fn gaussian_intercept_is_mean() {
        let d = Dataset::new(line(3), vec![1; 3], vec![1.0, 2.0, 3.0], vec![], vec![]).unwrap();
        let fit = fit_glm(&d, &Family::gaussian()).unwrap();
        assert!((fit.beta[0] - 2.0).abs() < 1e-14);
        assert!((baseline_prediction(&d, &Family::gaussian()).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn binomial_intercept_is_pooled_proportion() {
        let d = Dataset::new(line(3), vec![2, 6, 4], vec![1.0, 3.0, 0.0], vec![], vec![]).unwrap();
        let mu = baseline_prediction(&d, &Family::binomial()).unwrap();
        assert!((mu - 4.0 / 12.0).abs() < 1e-12);
        let d2 = Dataset::new(line(3), vec![2, 6, 4], vec![1.0, 3.0, 2.0], vec![], vec![]).unwrap();
        assert!((baseline_prediction(&d2, &Family::binomial()).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn poisson_intercept_is_mean() {
        let d = Dataset::new(line(3), vec![1; 3], vec![0.0, 2.0, 4.0], vec![], vec![]).unwrap();
        assert!((baseline_prediction(&d, &Family::poisson()).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn intercept_only_r2_is_exactly_zero() {
        for (fam, y) in [
            (Family::gaussian(), vec![1.0, 4.0, 2.0, 7.0]),
            (Family::binomial(), vec![1.0, 4.0, 2.0, 7.0]),
            (Family::poisson(), vec![1.0, 4.0, 2.0, 7.0]),
        ] {
            let d = Dataset::new(line(4), vec![8; 4], y, vec![], vec![]).unwrap();
            let fit = fit_glm(&d, &fam).unwrap();
            assert_eq!(r2_glm(&d, &fam, &fit).unwrap(), 0.0);
        }
    }

    #[test]
    fn constant_outcome_is_undefined() {
        let d = Dataset::new(line(4), vec![1; 4], vec![2.0; 4], vec![vec![0.0, 1.0, 3.0, 2.0]], vec!["a".into()])
            .unwrap();
        let fit = fit_glm(&d, &Family::gaussian()).unwrap();
        assert!(matches!(r2_glm(&d, &Family::gaussian(), &fit), Err(Error::UndefinedR2)));
    }

    #[test]
    fn gaussian_r2_matches_ols() {
        let x = vec![0.1, 0.7, 1.3, 2.2, 2.9, 3.4, 4.8, 5.1];
        let y = vec![1.0, 1.9, 2.2, 3.8, 4.1, 4.0, 6.3, 6.0];
        let d = Dataset::new(line(8), vec![1; 8], y.clone(), vec![x.clone()], vec!["x".into()]).unwrap();
        let fit = fit_glm(&d, &Family::gaussian()).unwrap();
        let r2 = r2_glm(&d, &Family::gaussian(), &fit).unwrap();
        // closed-form simple regression
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        assert!((r2 - sxy * sxy / (sxx * syy)).abs() < 1e-12);
    }

    #[test]
    fn logistic_recovers_truth_and_matches_newton() {
        let (data, truth) = simulate_logistic(200, &[-1.0, 0.5, -0.5], 20, 7);
        let fit = fit_glm(&data, &Family::binomial()).unwrap();
        for j in 0..3 {
            assert!((fit.beta[j] - truth[j]).abs() < 3.0 * fit.std_errors[j], "{j}: {:?}", fit.beta);
        }
        // independent Newton–Raphson on the binomial log-likelihood
        let x = &data.design;
        let mut b: DVector<f64> = DVector::zeros(3);
        for _ in 0..50 {
            let mut g = DVector::zeros(3);
            let mut h = DMatrix::zeros(3, 3);
            for i in 0..data.n() {
                let eta: f64 = (0..3).map(|j| x[(i, j)] * b[j]).sum();
                let p = 1.0 / (1.0 + (-eta).exp());
                let m = data.trials[i] as f64;
                for j in 0..3 {
                    g[j] += (data.y[i] - m * p) * x[(i, j)];
                    for k in 0..3 {
                        h[(j, k)] += m * p * (1.0 - p) * x[(i, j)] * x[(i, k)];
                    }
                }
            }
            b += h.lu().solve(&g).unwrap();
        }
        for j in 0..3 {
            assert!((fit.beta[j] - b[j]).abs() < 1e-8);
        }
        assert!(fit.converged && !fit.separation_warning);
    }

    #[test]
    fn stronger_covariate_gives_larger_r2() {
        let (strong, _) = simulate_logistic(150, &[-0.5, 1.5], 25, 11);
        let (weak, _) = simulate_logistic(150, &[-0.5, 0.05], 25, 11);
        let fam = Family::binomial();
        let r_strong = r2_glm(&strong, &fam, &fit_glm(&strong, &fam).unwrap()).unwrap();
        let r_weak = r2_glm(&weak, &fam, &fit_glm(&weak, &fam).unwrap()).unwrap();
        assert!(r_strong > r_weak, "{r_strong} vs {r_weak}");

        // literal re-evaluation of the definition
        let fit = fit_glm(&strong, &fam).unwrap();
        let p0 = strong.y.iter().sum::<f64>() / strong.trials.iter().map(|&m| m as f64).sum::<f64>();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..strong.n() {
            let obs = strong.y[i] / strong.trials[i] as f64;
            num += fam.c_v_quadrature(obs, fit.fitted_means[i]).unwrap().value;
            den += fam.c_v_quadrature(obs, p0).unwrap().value;
        }
        assert!((r_strong - (1.0 - num / den)).abs() < 1e-9);
    }

    #[test]
    fn separation_is_flagged() {
        let x = vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0];
        let d = Dataset::new(line(6), vec![5; 6], vec![0.0, 0.0, 0.0, 5.0, 5.0, 5.0], vec![x], vec!["x".into()])
            .unwrap();
        match fit_glm(&d, &Family::binomial()) {
            Ok(fit) => assert!(fit.separation_warning),
            Err(Error::NonConvergence { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn affine_covariate_rescaling(a in prop_oneof![-5.0f64..-0.2, 0.2f64..5.0], c in -10.0f64..10.0, seed in 0u64..1000) {
            let (data, _) = simulate_logistic(60, &[-0.3, 0.8], 15, seed);
            let fam = Family::binomial();
            let base = fit_glm(&data, &fam).unwrap();
            let col: Vec<f64> = data.design.column(1).iter().map(|v| a * v + c).collect();
            let moved = Dataset::new(data.coords.clone(), data.trials.clone(), data.y.clone(), vec![col], vec!["x".into()]).unwrap();
            let fit = fit_glm(&moved, &fam).unwrap();
            for (u, v) in base.fitted_means.iter().zip(&fit.fitted_means) {
                prop_assert!((u - v).abs() < 1e-10);
            }
            let r1 = r2_glm(&data, &fam, &base).unwrap();
            let r2 = r2_glm(&moved, &fam, &fit).unwrap();
            prop_assert!((r1 - r2).abs() < 1e-10);
        }

        #[test]
        fn permutation_invariance(seed in 0u64..1000, shift in 1usize..59) {
            let (data, _) = simulate_logistic(60, &[-0.3, 0.8], 15, seed);
            let fam = Family::binomial();
            let perm: Vec<usize> = (0..60).map(|i| (i + shift) % 60).collect();
            let permuted = Dataset::new(
                perm.iter().map(|&i| data.coords[i]).collect(),
                perm.iter().map(|&i| data.trials[i]).collect(),
                perm.iter().map(|&i| data.y[i]).collect(),
                vec![perm.iter().map(|&i| data.design[(i, 1)]).collect()],
                vec!["x".into()],
            ).unwrap();
            let a = fit_glm(&data, &fam).unwrap();
            let b = fit_glm(&permuted, &fam).unwrap();
            for j in 0..2 {
                prop_assert!((a.beta[j] - b.beta[j]).abs() < 1e-10);
            }
            let ra = r2_glm(&data, &fam, &a).unwrap();
            let rb = r2_glm(&permuted, &fam, &b).unwrap();
            prop_assert!((ra - rb).abs() < 1e-12);
        }
    }
}
