use thiserror::Error;

#[derive(Debug, Error)]
pub enum XfaError {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("Psi is not positive definite even with jitter {jitter:e}")]
    DegeneratePsi { jitter: f64 },

    #[error("coordinate descent produced a non-finite value at cell ({row}, {col})")]
    Divergence { row: usize, col: usize },

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, XfaError>;
