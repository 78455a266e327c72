//! Coefficients of determination for generalized linear geostatistical
//! models.
//!
//! The pieces, bottom up: the `c_V` variation functional ([`expfam`]), GLM
//! fitting and its R² ([`glm`]), exponential covariance ([`gpcov`]), the
//! closed-form linear case ([`lingeo`]), latent-field sampling
//! ([`posterior`]), Monte Carlo maximum likelihood ([`mcml`]) and the
//! Monte Carlo R² estimators ([`r2engine`]).

pub mod artifact;
pub mod data;
pub mod error;
pub mod expfam;
pub mod glm;
pub mod gpcov;
pub mod lingeo;
pub mod mcml;
pub mod optim;
pub mod posterior;
pub mod quad;
pub mod r2engine;
pub mod sim;

pub use data::Dataset;
pub use error::{Error, Result};
pub use expfam::{Family, FamilyKind, Link};
pub use gpcov::CovParams;
pub use mcml::{GlgmParams, McmlFit, McmlSchedule};
pub use posterior::{PosteriorDraws, SamplerSchedule};
pub use r2engine::{McEstimate, R2Report, SeComparison};
