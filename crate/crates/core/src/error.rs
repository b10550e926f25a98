//! Crate-wide error type.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error for every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Filesystem access failed; carries the offending path.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents violate the expected format
    /// (bad magic, wrong field, payload size mismatch, malformed JSON, ...).
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Matrix/vector dimensions are inconsistent with each other.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numeric computation produced or encountered a non-finite or
    /// otherwise unusable value (NaN loss, zero-norm row, ...).
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    /// Wrap an `io::Error` together with the path that produced it.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Format violation in a named file.
    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
