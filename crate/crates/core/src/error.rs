use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum DermError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("training failed at iteration {iteration}: {reason}")]
    Training { iteration: usize, reason: String },

    #[error("invalid model: {0}")]
    Model(String),

    /// An evaluation routine was handed a batch simulated under a tilted measure.
    #[error("evaluation requires a risk-neutral batch, got {0}")]
    Measure(String),

    #[error("outside domain: {0}")]
    Domain(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("non-finite wealth on path {path}")]
    Rollout { path: usize },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DermError>;
