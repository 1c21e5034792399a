use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the defense pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("checkpoint has bad magic (expected \"OVNET001\")")]
    BadCheckpointMagic,

    #[error("truncated {what}: needed {needed} bytes, have {available}")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint shape table mismatch: {0}")]
    ShapeTable(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("grid of {rows}x{cols} is too small for 3x3 voting")]
    GridTooSmall { rows: usize, cols: usize },

    #[error("expected exactly 9 scores, got {0}")]
    WrongArity(usize),

    #[error("invalid position ({x}, {y}): {reason}")]
    InvalidPosition { x: i64, y: i64, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
