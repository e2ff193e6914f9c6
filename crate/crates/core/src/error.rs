use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// Training stopped on a non-finite or divergent loss. The last good
    /// state was written to `checkpoint` when one was available.
    #[error("training aborted at epoch {epoch}: {reason}")]
    Aborted {
        epoch: usize,
        reason: String,
        checkpoint: Option<PathBuf>,
    },

    #[error("refusing to overwrite non-empty directory {0} (pass --force)")]
    OutputExists(PathBuf),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
