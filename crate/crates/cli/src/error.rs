//! Application errors mapped to process exit codes.

use thiserror::Error;

/// Exit code contract: 0 ok, 2 config/input error, 3 checkpoint
/// incompatibility, 4 numerical failure.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Checkpoint(_) => 3,
            AppError::Numeric(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        AppError::Config(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        AppError::Checkpoint(msg.into())
    }
}

impl From<cyclediff_core::Error> for AppError {
    fn from(e: cyclediff_core::Error) -> Self {
        match e {
            cyclediff_core::Error::NonFinite(m) => AppError::Numeric(m),
            other => AppError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Config(e.to_string())
    }
}

pub type AppResult<T> = Result<T, AppError>;
