use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("EDF header malformed at byte {offset}: {reason}")]
    EdfHeader { offset: usize, reason: String },

    #[error("EDF data truncated: header declares {expected} data records, file holds {actual}")]
    EdfTruncated { expected: usize, actual: usize },

    #[error("invalid EDF content: {0}")]
    EdfInvalid(String),

    #[error("malformed TAL framing in annotation record {record}: {reason}")]
    Tal { record: usize, reason: String },

    #[error("annotation table line {line}: {reason}")]
    AnnotationTable { line: usize, reason: String },

    #[error("channel {requested:?} not found; available: {available:?}")]
    ChannelNotFound { requested: String, available: Vec<String> },

    #[error("channel {requested:?} is ambiguous; matching labels: {matches:?}")]
    ChannelAmbiguous { requested: String, matches: Vec<String> },

    #[error("non-finite sample at index {index}")]
    NonFinite { index: usize },

    #[error("graph is disconnected: vertex {vertex} unreachable from vertex {from}")]
    Disconnected { from: usize, vertex: usize },

    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    Shape {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("label {label} at index {index} outside 0..{n_classes}")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        n_classes: usize,
    },

    #[error("class {class:?} has {count} samples; at least {required} required")]
    TooFewSamples {
        class: String,
        count: usize,
        required: usize,
    },

    #[error("non-finite loss in batch sample {index}")]
    NonFiniteLoss { index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
