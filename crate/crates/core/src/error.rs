use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{}: row {row}: {message}", path.display())]
    Manifest {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("could not place {requested} cells (placed {placed}) after {attempts} attempts")]
    Placement {
        requested: usize,
        placed: usize,
        attempts: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: String, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("covariance matrix is not positive definite even with jitter {jitter:e}")]
    DegenerateCovariance { jitter: f64 },

    #[error("all {0} trials failed")]
    AllTrialsFailed(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("run directory {} is locked by another process", .0.display())]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad user input (configs, data files) rather than a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::Manifest { .. }
                | Error::Shape(_)
                | Error::CheckpointVersion { .. }
                | Error::CheckpointTruncated(_)
                | Error::TensorShape { .. }
                | Error::Empty(_)
                | Error::InvalidInput(_)
                | Error::Json(_)
        )
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

/// Prefixes an I/O error with the path it concerns, keeping its kind.
pub(crate) fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
