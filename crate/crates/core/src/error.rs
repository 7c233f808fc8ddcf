use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::ShapeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by the toolkit. Variants are grouped so a caller can map
/// them onto process exit codes (configuration, data, numeric).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Shape(#[from] ShapeError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad category of the error, used by the command line front end.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Json(_) => ErrorKind::Config,
            Error::Parse { .. } | Error::Validation(_) | Error::Io { .. } => ErrorKind::Data,
            Error::Numeric(_) | Error::Shape(_) => ErrorKind::Numeric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}
