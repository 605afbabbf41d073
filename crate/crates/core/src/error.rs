use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("softmax row {row} has every entry masked")]
    FullyMaskedRow { row: usize },

    #[error("cross entropy: every label is ignore_index")]
    AllIgnored,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("vocabulary overflow: {size} tokens exceed capacity {capacity}")]
    VocabOverflow { size: usize, capacity: usize },

    #[error("{path}:{line}: {msg}")]
    Dataset {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("schedule step {step} exceeds total {total}")]
    Schedule { step: usize, total: usize },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
