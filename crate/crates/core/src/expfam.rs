//! Exponential-family (and quasi) link/variance pairs and the `c_V`
//! variance arc-length functional.
//!
//! `c_V(a, b) = (∫_a^b sqrt(1 + V'(u)^2) du)^2` is the unit of variation
//! behind every coefficient of determination in this crate. For the
//! binomial family it is evaluated on the proportion scale: observed
//! `y / m` against a predicted probability, with `V(μ) = μ(1 − μ)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{adaptive_simpson, DEFAULT_MAX_DEPTH, DEFAULT_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Gaussian,
    Binomial,
    Poisson,
    Quasi,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Binomial => "binomial",
            FamilyKind::Poisson => "poisson",
            FamilyKind::Quasi => "quasi",
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logit,
    Log,
}

impl Link {
    pub fn name(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Logit => "logit",
            Link::Log => "log",
        }
    }

    /// `g(μ)`. The caller is responsible for the domain.
    pub fn apply(self, mu: f64) -> f64 {
        match self {
            Link::Identity => mu,
            Link::Logit => mu.ln() - (-mu).ln_1p(),
            Link::Log => mu.ln(),
        }
    }

    /// `g⁻¹(η)`; the logistic branch never overflows.
    pub fn invert(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => logistic(eta),
            Link::Log => eta.exp(),
        }
    }

    /// `dμ/dη` at `η`.
    pub fn mu_eta(self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => {
                let p = logistic(eta);
                p * (1.0 - p)
            }
            Link::Log => eta.exp(),
        }
    }
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// User-specified variance function for quasi-models.
#[derive(Clone)]
pub struct QuasiVariance {
    pub variance: ScalarFn,
    /// Analytic `V'`; central differences are used when absent.
    pub derivative: Option<ScalarFn>,
    /// Closed interval of admissible means.
    pub domain: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvMethod {
    ClosedForm,
    Quadrature,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvResult {
    pub value: f64,
    pub abs_error_bound: f64,
    pub method: CvMethod,
}

#[derive(Clone)]
pub struct Family {
    kind: FamilyKind,
    link: Link,
    quasi: Option<QuasiVariance>,
}

impl fmt::Debug for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Family")
            .field("kind", &self.kind)
            .field("link", &self.link)
            .finish()
    }
}

impl Family {
    pub fn gaussian() -> Self {
        Family { kind: FamilyKind::Gaussian, link: Link::Identity, quasi: None }
    }

    pub fn binomial() -> Self {
        Family { kind: FamilyKind::Binomial, link: Link::Logit, quasi: None }
    }

    pub fn poisson() -> Self {
        Family { kind: FamilyKind::Poisson, link: Link::Log, quasi: None }
    }

    pub fn quasi(link: Link, variance: QuasiVariance) -> Result<Self> {
        let (lo, hi) = variance.domain;
        if !(lo < hi) {
            return Err(Error::InvalidParams(format!("empty quasi mean domain [{lo}, {hi}]")));
        }
        Ok(Family { kind: FamilyKind::Quasi, link, quasi: Some(variance) })
    }

    /// Canonical family for a kind; quasi families need [`Family::quasi`].
    pub fn from_kind(kind: FamilyKind) -> Result<Self> {
        match kind {
            FamilyKind::Gaussian => Ok(Self::gaussian()),
            FamilyKind::Binomial => Ok(Self::binomial()),
            FamilyKind::Poisson => Ok(Self::poisson()),
            FamilyKind::Quasi => Err(Error::InvalidParams(
                "a quasi family needs a user-supplied variance function".into(),
            )),
        }
    }

    /// Same family with a different link.
    pub fn with_link(mut self, link: Link) -> Self {
        self.link = link;
        self
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn is_canonical(&self) -> bool {
        matches!(
            (self.kind, self.link),
            (FamilyKind::Gaussian, Link::Identity)
                | (FamilyKind::Binomial, Link::Logit)
                | (FamilyKind::Poisson, Link::Log)
        )
    }

    /// Closed interval of means on which `c_V` is defined.
    pub fn mean_domain(&self) -> (f64, f64) {
        match self.kind {
            FamilyKind::Gaussian => (f64::NEG_INFINITY, f64::INFINITY),
            FamilyKind::Binomial => (0.0, 1.0),
            FamilyKind::Poisson => (0.0, f64::INFINITY),
            FamilyKind::Quasi => self.quasi.as_ref().map(|q| q.domain).unwrap_or((0.0, 0.0)),
        }
    }

    fn check_mean(&self, mu: f64) -> Result<()> {
        let (lo, hi) = self.mean_domain();
        if !mu.is_finite() || mu < lo || mu > hi {
            return Err(Error::Domain { family: self.kind.name(), value: mu });
        }
        Ok(())
    }

    pub fn variance(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 1.0,
            FamilyKind::Binomial => mu * (1.0 - mu),
            FamilyKind::Poisson => mu,
            FamilyKind::Quasi => (self.quasi.as_ref().expect("quasi variance").variance)(mu),
        }
    }

    pub fn variance_deriv(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 0.0,
            FamilyKind::Binomial => 1.0 - 2.0 * mu,
            FamilyKind::Poisson => 1.0,
            FamilyKind::Quasi => {
                let q = self.quasi.as_ref().expect("quasi variance");
                match &q.derivative {
                    Some(d) => d(mu),
                    None => {
                        let h = 1e-6 * mu.abs().max(1.0);
                        ((q.variance)(mu + h) - (q.variance)(mu - h)) / (2.0 * h)
                    }
                }
            }
        }
    }

    /// `η = g(μ)`; `μ` must lie in the open interior where the link is finite.
    pub fn link_apply(&self, mu: f64) -> Result<f64> {
        let ok = match self.link {
            Link::Identity => mu.is_finite(),
            Link::Logit => mu > 0.0 && mu < 1.0,
            Link::Log => mu > 0.0 && mu.is_finite(),
        };
        if !ok {
            return Err(Error::Domain { family: self.kind.name(), value: mu });
        }
        Ok(self.link.apply(mu))
    }

    pub fn link_invert(&self, eta: f64) -> Result<f64> {
        if eta.is_nan() {
            return Err(Error::Domain { family: self.kind.name(), value: eta });
        }
        Ok(self.link.invert(eta))
    }

    /// Squared arc length of `V` between two means.
    pub fn c_v(&self, a: f64, b: f64) -> Result<CvResult> {
        self.check_mean(a)?;
        self.check_mean(b)?;
        if a == b {
            return Ok(CvResult { value: 0.0, abs_error_bound: 0.0, method: CvMethod::ClosedForm });
        }
        let arc = match self.kind {
            FamilyKind::Gaussian => (b - a).abs(),
            FamilyKind::Poisson => std::f64::consts::SQRT_2 * (b - a).abs(),
            FamilyKind::Binomial => binomial_arc(a, b),
            FamilyKind::Quasi => return self.c_v_quadrature(a, b),
        };
        Ok(CvResult { value: arc * arc, abs_error_bound: 0.0, method: CvMethod::ClosedForm })
    }

    /// `c_V` by adaptive Simpson regardless of family.
    pub fn c_v_quadrature(&self, a: f64, b: f64) -> Result<CvResult> {
        self.check_mean(a)?;
        self.check_mean(b)?;
        if a == b {
            return Ok(CvResult { value: 0.0, abs_error_bound: 0.0, method: CvMethod::Quadrature });
        }
        let q = adaptive_simpson(
            |u| {
                let d = self.variance_deriv(u);
                (1.0 + d * d).sqrt()
            },
            a,
            b,
            DEFAULT_TOL,
            DEFAULT_MAX_DEPTH,
        )?;
        let arc = q.value.abs();
        Ok(CvResult {
            value: arc * arc,
            abs_error_bound: 2.0 * arc * q.error_estimate + q.error_estimate * q.error_estimate,
            method: CvMethod::Quadrature,
        })
    }

    /// `c_V` value only; the form used in the sums of every R² estimator.
    pub fn cv(&self, a: f64, b: f64) -> Result<f64> {
        Ok(self.c_v(a, b)?.value)
    }
}

/// `∫_a^b sqrt(1 + (1 − 2u)^2) du` in absolute value, via `t = 1 − 2u`.
fn binomial_arc(a: f64, b: f64) -> f64 {
    fn antiderivative(t: f64) -> f64 {
        0.5 * (t * (1.0 + t * t).sqrt() + t.asinh())
    }
    (0.5 * (antiderivative(1.0 - 2.0 * a) - antiderivative(1.0 - 2.0 * b))).abs()
}
