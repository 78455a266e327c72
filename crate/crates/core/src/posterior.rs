//! Sampling the latent field given the data, `S | (y, d)`.
//!
//! The posterior mode is found by Newton–Raphson; the chain then runs a
//! Metropolis-adjusted Langevin sampler in the space standardised by the
//! Cholesky factor of the negative log-posterior Hessian at the mode,
//! `S = ŝ + L⁻ᵀu` with `LLᵀ = W(ŝ) + Σ⁻¹`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expfam::{logistic, softplus, Family, FamilyKind};
use crate::gpcov::{build_cov, CovMatrix};
use crate::mcml::GlgmParams;

const NEWTON_MAX_ITER: usize = 100;
const MODE_GRAD_TOL: f64 = 1e-6;
/// Optimal acceptance rate of the Langevin sampler.
pub const TARGET_ACCEPTANCE: f64 = 0.574;
const ADAPT_EXPONENT: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerSchedule {
    pub burn_in: usize,
    pub thin: usize,
    /// Number of retained draws `B`.
    pub samples: usize,
    pub seed: u64,
}

impl SamplerSchedule {
    pub fn new(burn_in: usize, thin: usize, samples: usize, seed: u64) -> Self {
        SamplerSchedule { burn_in, thin, samples, seed }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.samples == 0 {
            return Err(Error::InvalidParams("thin and samples must be positive".into()));
        }
        Ok(())
    }
}

impl Default for SamplerSchedule {
    fn default() -> Self {
        SamplerSchedule { burn_in: 10_000, thin: 8, samples: 1_000, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct LaplaceMode {
    pub s_hat: DVector<f64>,
    /// Lower factor of `W(ŝ) + Σ⁻¹`.
    pub hessian_chol: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    /// `B × n`, one retained draw per row.
    pub draws: DMatrix<f64>,
    /// Over post-burn-in proposals.
    pub acceptance_rate: f64,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Langevin step size, frozen at the end of burn-in.
    pub step_size: f64,
    pub mode: DVector<f64>,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.nrows() == 0
    }

    pub fn n_sites(&self) -> usize {
        self.draws.ncols()
    }

    /// Draws as a CSV table: `B` rows, one column per site.
    pub fn write_csv<W: Write>(&self, site_ids: &[String], writer: W) -> Result<()> {
        if site_ids.len() != self.n_sites() {
            return Err(Error::Mismatch("site ids do not match draw columns".into()));
        }
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(site_ids)?;
        for row in self.draws.row_iter() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Conditional log-likelihood of the outcomes given the linear predictor.
struct Likelihood {
    kind: FamilyKind,
    y: Vec<f64>,
    m: Vec<f64>,
    tau2: f64,
}

impl Likelihood {
    fn new(data: &Dataset, family: &Family, params: &GlgmParams) -> Result<Self> {
        if !family.is_canonical() {
            return Err(Error::Unsupported { family: family.kind().name(), operation: "posterior sampling (non-canonical link)" });
        }
        if family.kind() == FamilyKind::Gaussian && !(params.cov.tau2 > 0.0) {
            return Err(Error::InvalidParams("gaussian responses need a positive tau2".into()));
        }
        data.check_family(family)?;
        Ok(Likelihood {
            kind: family.kind(),
            y: data.y.clone(),
            m: data.trials.iter().map(|&m| m as f64).collect(),
            tau2: params.cov.tau2,
        })
    }

    fn site(&self, i: usize, eta: f64) -> f64 {
        let (y, m) = (self.y[i], self.m[i]);
        match self.kind {
            FamilyKind::Binomial => y * eta - m * softplus(eta),
            FamilyKind::Poisson => y * eta - m * eta.exp(),
            _ => -0.5 * (y - eta) * (y - eta) / self.tau2,
        }
    }

    /// `(∂ℓ/∂η, −∂²ℓ/∂η²)` at one site.
    fn derivs(&self, i: usize, eta: f64) -> (f64, f64) {
        let (y, m) = (self.y[i], self.m[i]);
        match self.kind {
            FamilyKind::Binomial => {
                let p = logistic(eta);
                (y - m * p, m * p * (1.0 - p))
            }
            FamilyKind::Poisson => {
                let mu = m * eta.exp();
                (y - mu, mu)
            }
            _ => ((y - eta) / self.tau2, 1.0 / self.tau2),
        }
    }
}

fn linear_offset(data: &Dataset, params: &GlgmParams) -> Result<DVector<f64>> {
    if params.beta.len() != data.p() {
        return Err(Error::Mismatch(format!(
            "{} coefficients for {} design columns",
            params.beta.len(),
            data.p()
        )));
    }
    Ok(&data.design * DVector::from_column_slice(&params.beta))
}

pub fn laplace_mode(data: &Dataset, family: &Family, params: &GlgmParams) -> Result<LaplaceMode> {
    let lik = Likelihood::new(data, family, params)?;
    let offset = linear_offset(data, params)?;
    let cov = build_cov(&data.coords, &params.cov)?;
    laplace_mode_with(&lik, &offset, &cov)
}

fn laplace_mode_with(lik: &Likelihood, offset: &DVector<f64>, cov: &CovMatrix) -> Result<LaplaceMode> {
    let n = offset.len();
    let sigma = &cov.sigma;
    let mut s = DVector::zeros(n);
    // a = Σ⁻¹ s, tracked alongside s so Σ is never inverted during the search.
    let mut a = DVector::zeros(n);
    let objective = |s: &DVector<f64>, a: &DVector<f64>| -> f64 {
        (0..n).map(|i| lik.site(i, offset[i] + s[i])).sum::<f64>() - 0.5 * a.dot(s)
    };
    let mut obj = objective(&s, &a);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;

    for it in 0..=NEWTON_MAX_ITER {
        let mut g = DVector::zeros(n);
        let mut w = DVector::zeros(n);
        for i in 0..n {
            let (gi, wi) = lik.derivs(i, offset[i] + s[i]);
            g[i] = gi;
            w[i] = wi;
        }
        grad_norm = (&g - &a).norm();
        iterations = it;
        if grad_norm < MODE_GRAD_TOL || it == NEWTON_MAX_ITER {
            break;
        }
        // (W + Σ⁻¹) s_new = W s + g, solved through B = I + W½ Σ W½.
        let sw = w.map(f64::sqrt);
        let b = w.component_mul(&s) + &g;
        let mut bmat = DMatrix::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                bmat[(i, j)] += sw[i] * sigma[(i, j)] * sw[j];
            }
        }
        let lb = bmat.cholesky().ok_or_else(|| Error::NotPositiveDefinite("I + W½ΣW½".into()))?;
        let sb = sigma * &b;
        let inner = lb.solve(&sw.component_mul(&sb));
        let a_new = &b - sw.component_mul(&inner);
        let s_new = sigma * &a_new;

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let s_try = &s + (&s_new - &s) * t;
            let a_try = &a + (&a_new - &a) * t;
            let o = objective(&s_try, &a_try);
            if o.is_finite() && o >= obj - 1e-12 * obj.abs().max(1.0) {
                s = s_try;
                a = a_try;
                obj = o;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let converged = grad_norm < MODE_GRAD_TOL;
    if !converged {
        return Err(Error::NonConvergence {
            what: "Laplace mode search",
            iterations,
            detail: format!("gradient norm {grad_norm:e}"),
        });
    }
    let mut h = cov.inverse();
    for i in 0..n {
        h[(i, i)] += lik.derivs(i, offset[i] + s[i]).1;
    }
    let hessian_chol = h
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("negative log-posterior Hessian at the mode".into()))?
        .l();
    Ok(LaplaceMode { s_hat: s, hessian_chol, converged, iterations, grad_norm })
}

/// Log-posterior of `S` in the standardised coordinates.
struct Standardised<'a> {
    lik: &'a Likelihood,
    offset: &'a DVector<f64>,
    mode: &'a DVector<f64>,
    chol: &'a DMatrix<f64>,
    precision: DMatrix<f64>,
}

struct Point {
    u: DVector<f64>,
    s: DVector<f64>,
    log_post: f64,
    grad: DVector<f64>,
}

impl Standardised<'_> {
    fn eval(&self, u: DVector<f64>) -> Result<Point> {
        let z = self.chol.tr_solve_lower_triangular(&u).expect("non-singular factor");
        let s = self.mode + z;
        let qs = &self.precision * &s;
        let mut ll = 0.0;
        let mut g = DVector::zeros(s.len());
        for i in 0..s.len() {
            let eta = self.offset[i] + s[i];
            let li = self.lik.site(i, eta);
            if li.is_nan() || li == f64::INFINITY {
                return Err(Error::NonFinite { site: i });
            }
            ll += li;
            g[i] = self.lik.derivs(i, eta).0 - qs[i];
        }
        let log_post = ll - 0.5 * s.dot(&qs);
        let grad = self.chol.solve_lower_triangular(&g).expect("non-singular factor");
        Ok(Point { u, s, log_post, grad })
    }
}

/// Runs the Langevin chain; the step size adapts towards acceptance 0.574
/// during burn-in only and is frozen afterwards.
pub fn sample_posterior(
    data: &Dataset,
    family: &Family,
    params: &GlgmParams,
    schedule: &SamplerSchedule,
) -> Result<PosteriorDraws> {
    schedule.validate()?;
    let lik = Likelihood::new(data, family, params)?;
    let offset = linear_offset(data, params)?;
    let cov = build_cov(&data.coords, &params.cov)?;
    let mode = laplace_mode_with(&lik, &offset, &cov)?;
    let target = Standardised {
        lik: &lik,
        offset: &offset,
        mode: &mode.s_hat,
        chol: &mode.hessian_chol,
        precision: cov.inverse(),
    };

    let n = data.n();
    let mut rng = ChaCha20Rng::seed_from_u64(schedule.seed);
    let mut h = 1.65 * (n as f64).powf(-1.0 / 6.0);
    let mut cur = target.eval(DVector::zeros(n))?;
    if !cur.log_post.is_finite() {
        return Err(Error::NonFinite { site: 0 });
    }
    let total = schedule.burn_in + schedule.thin * schedule.samples;
    let mut draws = DMatrix::zeros(schedule.samples, n);
    let mut accepted = 0usize;
    let mut stored = 0usize;

    for t in 1..=total {
        let h2 = h * h;
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let prop_u = &cur.u + &cur.grad * (0.5 * h2) + &z * h;
        let prop = target.eval(prop_u)?;
        let log_alpha = if prop.log_post.is_finite() {
            let back = &cur.u - &prop.u - &prop.grad * (0.5 * h2);
            prop.log_post - cur.log_post - back.norm_squared() / (2.0 * h2) + 0.5 * z.norm_squared()
        } else {
            f64::NEG_INFINITY
        };
        let alpha = if log_alpha.is_nan() { 0.0 } else { log_alpha.min(0.0).exp() };
        let u: f64 = rng.random();
        let accept = u.ln() < log_alpha;
        if accept {
            cur = prop;
        }
        if t <= schedule.burn_in {
            h *= ((t as f64).powf(-ADAPT_EXPONENT) * (alpha - TARGET_ACCEPTANCE)).exp();
        } else {
            if accept {
                accepted += 1;
            }
            if (t - schedule.burn_in) % schedule.thin == 0 {
                draws.row_mut(stored).copy_from(&cur.s.transpose());
                stored += 1;
            }
        }
    }

    let acceptance_rate = accepted as f64 / (schedule.thin * schedule.samples) as f64;
    if !(0.1..=0.9).contains(&acceptance_rate) {
        return Err(Error::Acceptance { rate: acceptance_rate });
    }
    Ok(PosteriorDraws {
        draws,
        acceptance_rate,
        burn_in: schedule.burn_in,
        thin: schedule.thin,
        seed: schedule.seed,
        step_size: h,
        mode: mode.s_hat,
    })
}
