use std::path::PathBuf;

/// Errors from file formats, datasets and training runs.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{path}: bad magic at byte 0 (expected {expected})")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: unsupported version {found} at byte {offset}")]
    BadVersion { path: PathBuf, found: u16, offset: u64 },

    #[error("{path}: truncated at byte {offset} (needed {needed} more bytes)")]
    Truncated { path: PathBuf, offset: u64, needed: u64 },

    #[error("{path}: {what} at byte {offset}")]
    Corrupt { path: PathBuf, what: String, offset: u64 },

    #[error("invalid data: {0}")]
    Invalid(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Core(#[from] tsvit_core::CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RunError>;
