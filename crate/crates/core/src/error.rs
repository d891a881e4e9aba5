use thiserror::Error;

/// Errors produced by model construction, solvers and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),
    #[error("invalid reward: {0}")]
    InvalidReward(String),
    #[error("discount must lie in [0, 1), got {0}")]
    InvalidDiscount(f64),
    #[error("invalid radius: {0}")]
    InvalidRadius(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("problem too large: {0}")]
    TooLarge(String),
    #[error("fixed point not reached after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("non-finite Q value at step {step}, agent {agent}")]
    NonFinite { step: usize, agent: usize },
    #[error("linear program failed: {0}")]
    Lp(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
