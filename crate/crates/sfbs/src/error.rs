use thiserror::Error;

/// Library-wide error type.
///
/// `Divergence` carries the partial trace accumulated before the blow-up so
/// callers can still export and inspect it.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("certificate failure: {0}")]
    Certificate(String),

    #[error("condition violation ({clause}): {detail}")]
    ConditionViolation { clause: String, detail: String },

    #[error("power iteration did not converge after {iters} iterations (last estimate {last:e})")]
    NonConvergence { iters: usize, last: f64 },

    #[error("divergence at iteration {n}: {detail}")]
    Divergence {
        n: usize,
        detail: String,
        trace: Option<Box<crate::diagnostics::RunTrace>>,
    },

    #[error("reproducibility violation: {0}")]
    Reproducibility(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
