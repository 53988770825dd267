use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] avatar_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("non-finite metric: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, AppError>;

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        AppError::Format { path: path.into(), message: message.into() }
    }

    /// Process exit code: 2 usage, 3 data validation, 4 numeric fault.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 2,
            AppError::Core(avatar_core::Error::Numeric(_)) | AppError::NonFinite(_) => 4,
            _ => 3,
        }
    }
}
