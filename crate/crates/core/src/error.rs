use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CharmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CharmError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("failed to decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("image has a zero dimension ({height}x{width})")]
    EmptyImage { height: usize, width: usize },

    #[error("unsupported channel count {0}, expected 1 or 3")]
    Channels(usize),

    #[error("invalid dimension: {0}")]
    Dimension(String),

    #[error("image {height}x{width} is smaller than one {cell}px cell")]
    TooSmall { height: usize, width: usize, cell: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot select {k} cells out of {available}")]
    SelectionSize { k: usize, available: usize },

    #[error("strategy `{0}` needs an importance map")]
    MissingMap(String),

    #[error("pack format error: {0}")]
    Format(String),

    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid score distribution: {0}")]
    Distribution(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Data(String),
}
