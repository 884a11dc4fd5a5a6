//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up (dimension errors).
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Index out of range (e.g. a class label outside `[0, K)`).
    #[error("index error: {0}")]
    Index(String),

    /// Dataset file could not be ingested; names the file and byte offset.
    #[error("ingest error in {path} at offset {offset}: {detail}")]
    Ingest {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    /// Checkpoint file is corrupt or does not match the expected model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
