//! Monte Carlo maximum likelihood for the binomial-logit geostatistical model.
//!
//! With draws `x_1..x_B` of the latent variables given `y` at a reference
//! `ψ₀`, the likelihood ratio is approximated by
//! `log (1/B) Σ_j p(y, x_j; ψ) / p(y, x_j; ψ₀)` and maximised over
//! `ψ = (β, log σ², log φ)`. The reference is then moved to the optimum and
//! the procedure repeated until the optimum stops moving.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expfam::{softplus, Family, FamilyKind};
use crate::glm::fit_glm;
use crate::gpcov::{cholesky_jittered, log_det_from_factor, CovParams};
use crate::optim::{bfgs_numeric, central_hessian, BfgsOptions};
use crate::posterior::{sample_posterior, PosteriorDraws, SamplerSchedule};

/// Regression coefficients together with the covariance parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlgmParams {
    pub beta: Vec<f64>,
    pub cov: CovParams,
}

impl GlgmParams {
    pub fn new(beta: Vec<f64>, cov: CovParams) -> Self {
        GlgmParams { beta, cov }
    }
}

/// Latent variable the importance weights are taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentScale {
    /// The linear predictor `T = Dβ + S`; the outcome density cancels from
    /// the ratio, leaving Gaussian terms only.
    #[default]
    Predictor,
    /// The field `S` itself. Suited to a nearly vanishing field held at a
    /// fixed tiny σ², where the ratio reduces to the GLM likelihood ratio.
    Field,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmlSchedule {
    pub sampler: SamplerSchedule,
    pub max_reference_updates: usize,
    /// Stop once the optimum moves less than this on the optimisation scale.
    pub tolerance: f64,
    /// Hold σ² at this value instead of estimating it.
    pub fix_sigma2: Option<f64>,
    pub fix_phi: Option<f64>,
    /// Turn reference-loop non-convergence into an error.
    pub require_convergence: bool,
    #[serde(default)]
    pub latent_scale: LatentScale,
}

impl Default for McmlSchedule {
    fn default() -> Self {
        McmlSchedule {
            sampler: SamplerSchedule::default(),
            max_reference_updates: 5,
            tolerance: 0.01,
            fix_sigma2: None,
            fix_phi: None,
            require_convergence: false,
            latent_scale: LatentScale::Predictor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmlFit {
    pub params: GlgmParams,
    /// `β_0..β_{p−1}`, then `sigma2`, `phi`.
    pub param_names: Vec<String>,
    /// `None` for held parameters.
    pub std_errors: Vec<Option<f64>>,
    pub ci95: Vec<Option<[f64; 2]>>,
    pub mc_samples_used: usize,
    pub relative_likelihood_at_optimum: f64,
    pub reference_updates: usize,
    pub converged: bool,
    pub hessian_condition: f64,
    /// Effective sample size of the importance weights at the optimum.
    pub effective_sample_size: f64,
    pub acceptance_rates: Vec<f64>,
}

/// Starting values: GLM coefficients, `σ² = 1` and `φ` a quarter of the
/// bounding-box diagonal.
pub fn default_init(data: &Dataset, family: &Family) -> Result<GlgmParams> {
    let glm = fit_glm(data, family)?;
    Ok(GlgmParams::new(glm.beta, CovParams::new(1.0, bbox_diagonal(data) / 4.0, 0.0)?))
}

pub fn bbox_diagonal(data: &Dataset) -> f64 {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in &data.coords {
        x0 = x0.min(c[0]);
        x1 = x1.max(c[0]);
        y0 = y0.min(c[1]);
        y1 = y1.max(c[1]);
    }
    (x1 - x0).hypot(y1 - y0)
}

/// Affine map between `β` and coefficients of centred, scaled covariates.
#[derive(Debug, Clone)]
struct Standardisation {
    centre: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardisation {
    fn new(design: &DMatrix<f64>) -> Self {
        let n = design.nrows() as f64;
        let mut centre = vec![0.0];
        let mut scale = vec![1.0];
        for j in 1..design.ncols() {
            let col = design.column(j);
            let c = col.sum() / n;
            let s = (col.iter().map(|v| (v - c) * (v - c)).sum::<f64>() / n).sqrt();
            centre.push(c);
            scale.push(if s > 0.0 { s } else { 1.0 });
        }
        Standardisation { centre, scale }
    }

    fn to_internal(&self, beta: &[f64]) -> Vec<f64> {
        let mut b = vec![beta[0]];
        for j in 1..beta.len() {
            b[0] += beta[j] * self.centre[j];
            b.push(beta[j] * self.scale[j]);
        }
        b
    }

    fn to_external(&self, b: &[f64]) -> Vec<f64> {
        let mut beta = vec![b[0]];
        for j in 1..b.len() {
            let bj = b[j] / self.scale[j];
            beta[0] -= bj * self.centre[j];
            beta.push(bj);
        }
        beta
    }

    /// Jacobian `∂β / ∂b`.
    fn jacobian(&self) -> DMatrix<f64> {
        let p = self.scale.len();
        let mut j = DMatrix::zeros(p, p);
        j[(0, 0)] = 1.0;
        for k in 1..p {
            j[(k, k)] = 1.0 / self.scale[k];
            j[(0, k)] = -self.centre[k] / self.scale[k];
        }
        j
    }
}

/// Monte Carlo log-likelihood ratio against a fixed reference.
struct McLikelihood<'a> {
    y: &'a [f64],
    m: Vec<f64>,
    design: DMatrix<f64>,
    scale: LatentScale,
    /// `n × B`, one draw per column: `S` or `T = Dβ₀ + S`.
    latent: DMatrix<f64>,
    dist: DMatrix<f64>,
    reference: Vec<f64>,
    cache: Vec<(u64, Whitened)>,
    layout: Layout,
}

/// Quantities depending on `φ` only.
#[derive(Clone)]
struct Whitened {
    log_det: f64,
    /// `L⁻¹x_j` for every draw.
    z: DMatrix<f64>,
    z_norm2: Vec<f64>,
    /// `L⁻¹D`.
    zd: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    p: usize,
    fix_sigma2: Option<f64>,
    fix_phi: Option<f64>,
}

impl Layout {
    fn pack(&self, b: &[f64], cov: &CovParams) -> DVector<f64> {
        let mut v = b.to_vec();
        if self.fix_sigma2.is_none() {
            v.push(cov.sigma2.ln());
        }
        if self.fix_phi.is_none() {
            v.push(cov.phi.ln());
        }
        DVector::from_vec(v)
    }

    /// `(b, σ², φ)`.
    fn unpack(&self, theta: &DVector<f64>) -> (Vec<f64>, f64, f64) {
        let b = theta.rows(0, self.p).iter().copied().collect();
        let mut k = self.p;
        let sigma2 = self.fix_sigma2.unwrap_or_else(|| {
            k += 1;
            theta[k - 1].exp()
        });
        let phi = self.fix_phi.unwrap_or_else(|| theta[k].exp());
        (b, sigma2, phi)
    }
}

impl<'a> McLikelihood<'a> {
    fn new(
        data: &'a Dataset,
        design: DMatrix<f64>,
        draws: &PosteriorDraws,
        scale: LatentScale,
        layout: Layout,
        theta0: &DVector<f64>,
    ) -> Self {
        let mut latent = draws.draws.transpose();
        if scale == LatentScale::Predictor {
            let (b0, _, _) = layout.unpack(theta0);
            let offset = &design * DVector::from_vec(b0);
            for mut col in latent.column_iter_mut() {
                col += &offset;
            }
        }
        let mut lik = McLikelihood {
            y: &data.y,
            m: data.trials.iter().map(|&m| m as f64).collect(),
            design,
            scale,
            latent,
            dist: crate::gpcov::distance_matrix(&data.coords),
            reference: Vec::new(),
            cache: Vec::new(),
            layout,
        };
        lik.reference = lik.joint(theta0).unwrap_or_default();
        lik
    }

    fn n_draws(&self) -> usize {
        self.latent.ncols()
    }

    fn whitened(&mut self, phi: f64) -> Option<Whitened> {
        let key = phi.to_bits();
        if let Some((_, w)) = self.cache.iter().find(|(k, _)| *k == key) {
            return Some(w.clone());
        }
        let r = self.dist.map(|d| (-d / phi).exp());
        let (chol, _) = cholesky_jittered(&r, 1.0)?;
        let l = chol.l();
        let z = l.solve_lower_triangular(&self.latent)?;
        let zd = l.solve_lower_triangular(&self.design)?;
        let w = Whitened {
            log_det: log_det_from_factor(&l),
            z_norm2: z.column_iter().map(|c| c.norm_squared()).collect(),
            z,
            zd,
        };
        if self.cache.len() >= 4 {
            self.cache.remove(0);
        }
        self.cache.push((key, w.clone()));
        Some(w)
    }

    /// `log p(y, x_j; ψ)` up to a constant, for every draw.
    fn joint(&mut self, theta: &DVector<f64>) -> Option<Vec<f64>> {
        let (b, sigma2, phi) = self.layout.unpack(theta);
        if !(sigma2 > 0.0 && sigma2.is_finite() && phi > 0.0 && phi.is_finite()) {
            return None;
        }
        let w = self.whitened(phi)?;
        let b = DVector::from_vec(b);
        let n = self.y.len() as f64;
        let prior_const = -0.5 * n * sigma2.ln() - 0.5 * w.log_det;
        let out: Vec<f64> = match self.scale {
            LatentScale::Predictor => {
                // ‖z_j − L⁻¹Dβ‖²
                let r = &w.zd * &b;
                let cross = w.z.tr_mul(&r);
                let rr = r.norm_squared();
                (0..self.n_draws())
                    .map(|j| prior_const - 0.5 * (w.z_norm2[j] - 2.0 * cross[j] + rr) / sigma2)
                    .collect()
            }
            LatentScale::Field => {
                let offset = &self.design * b;
                self.latent
                    .column_iter()
                    .zip(&w.z_norm2)
                    .map(|(s, &qj)| {
                        let mut ll = 0.0;
                        for i in 0..s.len() {
                            let eta = offset[i] + s[i];
                            ll += self.y[i] * eta - self.m[i] * softplus(eta);
                        }
                        ll + prior_const - 0.5 * qj / sigma2
                    })
                    .collect()
            }
        };
        out.iter().all(|v| v.is_finite()).then_some(out)
    }

    fn log_weights(&mut self, theta: &DVector<f64>) -> Option<Vec<f64>> {
        let joint = self.joint(theta)?;
        Some(joint.iter().zip(&self.reference).map(|(a, b)| a - b).collect())
    }

    /// Relative log-likelihood; exactly 0 at the reference.
    fn value(&mut self, theta: &DVector<f64>) -> f64 {
        match self.log_weights(theta) {
            Some(lw) => log_mean_exp(&lw),
            None => f64::NEG_INFINITY,
        }
    }
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + (sum / v.len() as f64).ln()
}

fn effective_sample_size(log_w: &[f64]) -> f64 {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    s * s / s2
}

/// Seed for the chain at a given reference update.
fn reference_seed(seed: u64, update: usize) -> u64 {
    seed ^ (update as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn fit_mcml(data: &Dataset, family: &Family, init: &GlgmParams, schedule: &McmlSchedule) -> Result<McmlFit> {
    if family.kind() != FamilyKind::Binomial || !family.is_canonical() {
        return Err(Error::Unsupported { family: family.kind().name(), operation: "Monte Carlo maximum likelihood" });
    }
    data.check_fit_ready(family)?;
    if init.beta.len() != data.p() {
        return Err(Error::Mismatch(format!("{} initial coefficients for {} design columns", init.beta.len(), data.p())));
    }
    init.cov.validate()?;
    if schedule.max_reference_updates == 0 {
        return Err(Error::InvalidParams("at least one reference update is required".into()));
    }
    let std = Standardisation::new(&data.design);
    let design = standardised_design(&data.design, &std);
    let layout = Layout { p: data.p(), fix_sigma2: schedule.fix_sigma2, fix_phi: schedule.fix_phi };

    let mut cov0 = init.cov;
    if let Some(s) = schedule.fix_sigma2 {
        cov0.sigma2 = s;
    }
    if let Some(p) = schedule.fix_phi {
        cov0.phi = p;
    }
    cov0.tau2 = 0.0;
    cov0.validate()?;
    let mut theta0 = layout.pack(&std.to_internal(&init.beta), &cov0);
    let opts = BfgsOptions { max_iter: 200, grad_tol: 1e-5, f_tol: 1e-10, max_step: 1.0 };

    let mut acceptance_rates = Vec::new();
    let mut converged = false;
    let mut updates = 0;
    let mut last: Option<(McLikelihood, DVector<f64>, f64)> = None;

    for k in 0..schedule.max_reference_updates {
        updates = k + 1;
        let (b0, s2, ph) = layout.unpack(&theta0);
        let reference = GlgmParams::new(std.to_external(&b0), CovParams::new(s2, ph, 0.0)?);
        let sampler = schedule.sampler.with_seed(reference_seed(schedule.sampler.seed, k));
        let draws = sample_posterior(data, family, &reference, &sampler)?;
        acceptance_rates.push(draws.acceptance_rate);

        let mut lik = McLikelihood::new(data, design.clone(), &draws, schedule.latent_scale, layout, &theta0);
        if lik.reference.len() != lik.n_draws() {
            return Err(Error::Optimizer("Monte Carlo likelihood undefined at the reference".into()));
        }
        let min = bfgs_numeric(|t| -lik.value(t), theta0.clone(), 1e-5, &opts)?;
        if !min.value.is_finite() {
            return Err(Error::Optimizer("non-finite Monte Carlo likelihood at the optimum".into()));
        }
        let change = (&min.x - &theta0).amax();
        theta0 = min.x.clone();
        let value = -min.value;
        last = Some((lik, min.x, value));
        if change < schedule.tolerance {
            converged = true;
            break;
        }
    }
    if !converged && schedule.require_convergence {
        return Err(Error::NonConvergence {
            what: "MCML reference loop",
            iterations: updates,
            detail: format!("optimum still moving by more than {}", schedule.tolerance),
        });
    }

    let (mut lik, theta, value) = last.expect("at least one reference update");
    let hess = central_hessian(&mut |t| lik.value(t), &theta, 1e-4);
    let info = -(&hess + hess.transpose()) * 0.5;
    let eig = info.clone().symmetric_eigenvalues();
    let (emin, emax) = (eig.min(), eig.max());
    let condition = emax.abs() / emin.abs();
    if !(emin > 0.0) || !condition.is_finite() {
        return Err(Error::DegenerateHessian { condition });
    }
    let cov_theta = info.try_inverse().ok_or(Error::DegenerateHessian { condition })?;
    let ess = effective_sample_size(&lik.log_weights(&theta).unwrap_or_default());

    let (b, sigma2, phi) = layout.unpack(&theta);
    let beta = std.to_external(&b);
    let p = data.p();
    let jac = std.jacobian();
    let cov_b = cov_theta.view((0, 0), (p, p)).into_owned();
    let cov_beta = &jac * cov_b * jac.transpose();

    let mut names: Vec<String> = (0..p).map(|j| format!("beta{j}")).collect();
    names.push("sigma2".into());
    names.push("phi".into());
    let mut std_errors = Vec::with_capacity(p + 2);
    let mut ci95 = Vec::with_capacity(p + 2);
    for (j, &bj) in beta.iter().enumerate() {
        let se = cov_beta[(j, j)].sqrt();
        std_errors.push(Some(se));
        ci95.push(Some([bj - 1.96 * se, bj + 1.96 * se]));
    }
    let mut k = p;
    for (fixed, value) in [(schedule.fix_sigma2, sigma2), (schedule.fix_phi, phi)] {
        if fixed.is_some() {
            std_errors.push(None);
            ci95.push(None);
        } else {
            let se_log = cov_theta[(k, k)].sqrt();
            std_errors.push(Some(value * se_log));
            ci95.push(Some([value * (-1.96 * se_log).exp(), value * (1.96 * se_log).exp()]));
            k += 1;
        }
    }

    Ok(McmlFit {
        params: GlgmParams::new(beta, CovParams::new(sigma2, phi, 0.0)?),
        param_names: names,
        std_errors,
        ci95,
        mc_samples_used: schedule.sampler.samples,
        relative_likelihood_at_optimum: value,
        reference_updates: updates,
        converged,
        hessian_condition: condition,
        effective_sample_size: ess,
        acceptance_rates,
    })
}

fn standardised_design(design: &DMatrix<f64>, std: &Standardisation) -> DMatrix<f64> {
    let mut d = design.clone();
    for j in 1..d.ncols() {
        for i in 0..d.nrows() {
            d[(i, j)] = (d[(i, j)] - std.centre[j]) / std.scale[j];
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, SimSpec, Trend, Trials};

    fn small_spec() -> SimSpec {
        SimSpec {
            n: 60,
            bbox: [0.0, 1.0, 0.0, 1.0],
            family: FamilyKind::Binomial,
            beta: vec![-1.0, 0.8],
            sigma2: 0.5,
            phi: 0.2,
            tau2: 0.0,
            trials: Trials::Fixed(30),
            trend: Trend::Iid { count: 1 },
        }
    }

    fn quick() -> McmlSchedule {
        McmlSchedule { sampler: SamplerSchedule::new(1_000, 4, 300, 5), ..Default::default() }
    }

    #[test]
    fn standardisation_round_trip() {
        let data = simulate(&SimSpec::liberia(), 2).unwrap().data;
        let std = Standardisation::new(&data.design);
        let beta = vec![-6.3, 2.7e-3, 4.8e-3];
        let back = std.to_external(&std.to_internal(&beta));
        for j in 0..3 {
            assert!((back[j] - beta[j]).abs() < 1e-12);
        }
        let d = standardised_design(&data.design, &std);
        let b = std.to_internal(&beta);
        let e1 = &data.design * DVector::from_vec(beta);
        let e2 = d * DVector::from_vec(b);
        assert!((e1 - e2).amax() < 1e-10);
    }

    #[test]
    fn relative_likelihood_zero_at_reference() {
        let data = simulate(&small_spec(), 3).unwrap().data;
        let init = default_init(&data, &Family::binomial()).unwrap();
        let draws = sample_posterior(&data, &Family::binomial(), &init, &SamplerSchedule::new(500, 2, 100, 1)).unwrap();
        let std = Standardisation::new(&data.design);
        let layout = Layout { p: 2, fix_sigma2: None, fix_phi: None };
        let theta0 = layout.pack(&std.to_internal(&init.beta), &init.cov);
        let mut lik = McLikelihood::new(&data, standardised_design(&data.design, &std), &draws, LatentScale::Predictor, layout, &theta0);
        assert_eq!(lik.value(&theta0), 0.0);
    }

    #[test]
    fn fit_is_deterministic_and_optimum_nonnegative() {
        let data = simulate(&small_spec(), 4).unwrap().data;
        let init = default_init(&data, &Family::binomial()).unwrap();
        let a = fit_mcml(&data, &Family::binomial(), &init, &quick()).unwrap();
        let b = fit_mcml(&data, &Family::binomial(), &init, &quick()).unwrap();
        assert_eq!(a, b);
        assert!(a.relative_likelihood_at_optimum >= 0.0);
        for ci in a.ci95.iter().flatten() {
            assert!(ci[0] < ci[1]);
        }
        assert_eq!(a.param_names, ["beta0", "beta1", "sigma2", "phi"]);
    }

    #[test]
    fn vanishing_field_recovers_glm() {
        let data = simulate(&small_spec(), 5).unwrap().data;
        let fam = Family::binomial();
        let glm = fit_glm(&data, &fam).unwrap();
        let mut init = default_init(&data, &fam).unwrap();
        init.beta = vec![glm.beta[0] + 0.3, glm.beta[1] - 0.2];
        let sched = McmlSchedule { fix_sigma2: Some(1e-12), latent_scale: LatentScale::Field, ..quick() };
        let fit = fit_mcml(&data, &fam, &init, &sched).unwrap();
        for j in 0..2 {
            assert!((fit.params.beta[j] - glm.beta[j]).abs() < 1e-3, "{:?} vs {:?}", fit.params.beta, glm.beta);
        }
        assert_eq!(fit.std_errors[2], None);
    }

    #[test]
    fn rejects_other_families() {
        let data = simulate(&small_spec(), 6).unwrap().data;
        let init = default_init(&data, &Family::binomial()).unwrap();
        assert!(matches!(
            fit_mcml(&data, &Family::poisson(), &init, &quick()),
            Err(Error::Unsupported { .. })
        ));
    }
}
