use thiserror::Error;

/// Errors raised by the model, samplers and harness helpers.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or input violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Inconsistent configuration (mismatched sizes, bad parameters).
    #[error("configuration error: {0}")]
    Config(String),

    /// A mathematically undefined evaluation was requested.
    #[error("domain error: {0}")]
    Domain(String),

    /// A symmetric factorization failed or fell below the numerical floor.
    #[error("ill-conditioned covariance: {0}")]
    Conditioning(String),

    /// Point estimation could not be carried out.
    #[error("estimation failure: {0}")]
    Estimation(String),

    /// The sampler did not reach the final tempering exponent.
    #[error("sampler did not converge: {0}")]
    NotConverged(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by user-supplied configuration or inputs.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_) | Error::Config(_) | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
