//! Error type shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller passed an argument that violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data (waveform, tokens, mel) violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Configuration is inconsistent or degenerate.
    #[error("configuration error: {0}")]
    Config(String),

    /// Filesystem failure while reading or writing an artifact.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not match the expected format.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// A numeric failure during training or evaluation (non-finite loss etc).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An internal invariant was violated; indicates a bug.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
