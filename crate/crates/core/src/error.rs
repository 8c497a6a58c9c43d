//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("not positive definite (failing pivot index {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("covariance singular")]
    CovarianceSingular,

    #[error("singular conditioning set at ordered index {index}")]
    SingularConditioningSet { index: usize },

    #[error("diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("elbo overflow at Monte Carlo term {j}")]
    ElboOverflow { j: usize },

    #[error("generator overflow")]
    GeneratorOverflow,

    #[error("elicitation failed: {0}")]
    ElicitationFailed(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("family mismatch: checkpoint is {checkpoint}, data requires {data}")]
    FamilyMismatch { checkpoint: String, data: String },

    #[error("degenerate covariate after resampling")]
    DegenerateCovariate,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;
