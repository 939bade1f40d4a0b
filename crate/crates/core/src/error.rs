use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("matrix is not positive definite: non-positive pivot at index {pivot} after jitter")]
    Singular { pivot: usize },

    #[error("failed to converge: {0}")]
    Convergence(String),

    #[error("cannot sample episode from task `{task}`: {reason}")]
    Sampling { task: String, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing column `{column}` in {path}")]
    Schema { column: String, path: PathBuf },

    #[error("parse error in {path} at row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("non-finite loss in {episode}")]
    NonFinite { episode: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input rather than a defect or numerical failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Schema { .. }
                | Error::Parse { .. }
                | Error::Io { .. }
                | Error::Checkpoint(_)
                | Error::Shape(_)
                | Error::Sampling { .. }
        )
    }
}
