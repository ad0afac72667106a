use derm_core::error::DermError;
use thiserror::Error;

/// Failures mapped onto the process exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid or incomplete configuration; nothing was computed.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(DermError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Missing or unreadable run artifacts.
    #[error("{0}")]
    Artifacts(String),
}

impl From<DermError> for CliError {
    fn from(e: DermError) -> Self {
        match e {
            DermError::Io(io) => CliError::Io(io),
            other => CliError::Numeric(other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) | CliError::Artifacts(_) => 1,
        }
    }
}
