use std::path::PathBuf;

use crate::data::FbtError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad argument or configuration, detected before any work is done.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("block {block}: {message}")]
    Block { block: usize, message: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, batch {batch} (level {level}): {message}")]
    Divergence {
        epoch: usize,
        batch: usize,
        level: String,
        message: String,
    },

    /// The boundary could not be read off the normal log-likelihoods.
    #[error("boundary: {0}")]
    Boundary(String),

    #[error("{path}: {source}")]
    Fbt {
        path: PathBuf,
        #[source]
        source: FbtError,
    },

    #[error("manifest has {} problem(s):\n  {}", .0.len(), .0.join("\n  "))]
    Manifest(Vec<String>),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv {path}: {message}")]
    Csv { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from user input (arguments, configs,
    /// manifests) rather than from a failure while working.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Manifest(_) | Error::Dimension(_)
        )
    }
}
