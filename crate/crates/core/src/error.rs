use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MadeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MadeError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid count: {0}")]
    InvalidCount(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input outside {{0,1}}: {0}")]
    Domain(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ordering is incompatible with the observed set: {0}")]
    OrderingMismatch(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("model file: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MadeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MadeError::Io {
            path: path.into(),
            source,
        }
    }
}
