use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PdmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PdmError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(String),
}

impl PdmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Stable process exit code per error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            PdmError::Config(_) => 2,
            PdmError::Io { .. } | PdmError::Image { .. } | PdmError::Format { .. } => 3,
            PdmError::Shape(_) | PdmError::Empty(_) => 4,
            PdmError::NonFinite(_) => 5,
        }
    }
}
