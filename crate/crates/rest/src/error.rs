//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RestError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("chunk layout error: {0}")]
    Layout(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("verification failed: {0}")]
    Verify(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl RestError {
    /// Process exit code for the CLI: 1 validation, 2 numerical abort, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            RestError::Training(_) => 2,
            RestError::Io(_) | RestError::Format(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, RestError>;
