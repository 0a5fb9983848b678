use thiserror::Error;

/// Errors raised across the estimation and simulation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("design matrix is numerically singular (reciprocal condition {rcond:.3e})")]
    SingularDesign { rcond: f64 },

    #[error("no kernel mass at any requested lag (bandwidth {bandwidth})")]
    EmptyLag { bandwidth: f64 },

    #[error("only {found} populated lags below r0 = {r0}; need at least {needed}")]
    InsufficientPairs { found: usize, needed: usize, r0: f64 },

    #[error("theta gives non-positive semivariogram {value:.3e} at distance {distance}")]
    InvalidTheta { distance: f64, value: f64 },

    #[error("covariance not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("factorization failed after jitter {jitter:.1e}")]
    FactorizationFailure { jitter: f64 },

    #[error("too few pairs within radius: {found} < {needed}")]
    TooFewPairs { found: usize, needed: usize },

    #[error("{failed} of {total} replicates failed (limit 5%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error("malformed input at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Io(_) | Error::Json(_) | Error::Config(_) => 2,
            Error::Domain(_) | Error::InvalidParameter(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
