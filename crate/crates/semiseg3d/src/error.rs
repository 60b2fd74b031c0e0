//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, SegError>;

#[derive(Debug, thiserror::Error)]
pub enum SegError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("volume is not cubic: ({0}, {1}, {2})")]
    NotCubic(usize, usize, usize),

    #[error("invalid voxel label {label} at linear index {index} (expected 0..=3)")]
    InvalidLabel { label: i64, index: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("parameter structure mismatch: {0}")]
    StructureMismatch(String),

    #[error("non-finite loss at epoch {epoch} ({phase} phase, samples {samples:?})")]
    NonFiniteLoss {
        epoch: usize,
        phase: String,
        samples: Vec<String>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SegError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SegError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        SegError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
