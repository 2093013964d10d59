use thiserror::Error;

/// Errors raised by the filters, models and harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("integration diverged at step {step}")]
    Divergence { step: usize },

    #[error("observation operator is not differentiable at this state: {0}")]
    NonDifferentiable(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("ensemble too small: need at least {required} members, got {actual}")]
    InsufficientEnsemble { required: usize, actual: usize },

    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("kernel covariance is singular even after jitter")]
    SingularKernel,

    #[error("innovation covariance could not be factored")]
    ObservationDegeneracy,

    #[error("posterior covariance could not be factored")]
    PosteriorFactorization,

    #[error("all likelihood weights underflowed")]
    DegenerateLikelihood,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
