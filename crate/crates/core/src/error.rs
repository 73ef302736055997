use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("replay buffer not ready: holds {have} transitions, need {need}")]
    NotReady { have: usize, need: usize },
    #[error("value iteration did not converge after {iterations} sweeps (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
