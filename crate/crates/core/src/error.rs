use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not positive definite (failed at pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("constraint covariance B1 is not positive definite (smallest eigenvalue ~ {min_eigenvalue:e})")]
    DegenerateConstraintCov { min_eigenvalue: f64 },

    #[error("interval [{lower}, {upper}] is empty or has no numerical mass")]
    EmptyInterval { lower: f64, upper: f64 },

    #[error("rejection sampler exhausted {tries} tries with {accepted} accepted")]
    RejectionExhausted { tries: usize, accepted: usize },

    #[error("conditional variance underflow at coordinate {0}")]
    ConditionalVariance(usize),

    #[error("all importance weights underflowed")]
    WeightsUnderflow,

    #[error("not enough samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("constraint samples are not cached; refresh them first")]
    MissingSamples,

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
