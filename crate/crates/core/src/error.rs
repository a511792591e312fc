use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PafaError>;

#[derive(Debug, Error)]
pub enum PafaError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: line {line}: {message}")]
    Parse {
        context: String,
        line: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing data: {0}")]
    MissingData(String),

    /// Non-finite values or divergence during numeric work.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl PafaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PafaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        PafaError::Parse {
            context: context.into(),
            line,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        PafaError::InvalidInput(message.into())
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, PafaError::Numeric(_))
    }
}
