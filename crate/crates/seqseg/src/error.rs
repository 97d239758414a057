//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by any part of the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// I/O failure with the path that was being touched.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but does not parse as the expected container format.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Data violates an invariant (non-finite voxels, non-binary mask, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Array shapes disagree where they must match.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration or argument value.
    #[error("invalid config: {0}")]
    Config(String),

    /// A preprocessing step could not produce a result (e.g. empty foreground).
    #[error("extraction error: {0}")]
    Extraction(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Checkpoint file is corrupt or from an incompatible version/config.
    #[error("checkpoint error in {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
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

    pub fn checkpoint(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
