use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    /// An internal contract was violated, which signals a bug upstream of the call.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format version `{found}` (expected `{expected}`)")]
    Version { found: String, expected: String },

    #[error("parse error in `{field}`: {reason}")]
    Parse { field: String, reason: String },

    #[error("truncated blob for `{field}`: expected {expected} bytes, found {found}")]
    TruncatedBlob {
        field: String,
        expected: usize,
        found: usize,
    },

    #[error("validation error in `{field}`: {reason}")]
    Validation { field: String, reason: String },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
