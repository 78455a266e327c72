use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} outside the mean domain of the {family} family")]
    Domain { family: &'static str, value: f64 },

    #[error("quadrature did not reach tolerance {tol:e} on [{a}, {b}] (error estimate {estimate:e})")]
    Quadrature { a: f64, b: f64, tol: f64, estimate: f64 },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("{family} family is not supported by {operation}")]
    Unsupported { family: &'static str, operation: &'static str },

    #[error("{what} did not converge after {iterations} iterations ({detail})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        detail: String,
    },

    #[error("covariance matrix is ill-conditioned even with jitter {jitter:e} (minimum pairwise distance {min_distance:e})")]
    IllConditioned { jitter: f64, min_distance: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("coefficient of determination undefined: baseline variation is zero")]
    UndefinedR2,

    #[error("non-finite log-posterior at site {site}")]
    NonFinite { site: usize },

    #[error("sampler acceptance rate {rate:.3} outside [0.1, 0.9] after adaptation")]
    Acceptance { rate: f64 },

    #[error("degenerate Hessian at the optimum (condition number {condition:e})")]
    DegenerateHessian { condition: f64 },

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
