use std::io;

use crate::tensor::DType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape(Vec<usize>),

    #[error("buffer length mismatch: expected {expected} bytes, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index {index} out of range for extent {extent} (dimension {dim})")]
    IndexOutOfRange { dim: usize, index: usize, extent: usize },

    #[error("invalid index: {0}")]
    InvalidIndex(String),

    #[error("invalid permutation {0:?}")]
    InvalidPermutation(Vec<usize>),

    #[error("operation `{op}` does not support dtype {dtype:?}")]
    UnsupportedDType { op: &'static str, dtype: DType },

    #[error("dtype mismatch: expected {expected:?}, found {found:?}")]
    DTypeMismatch { expected: DType, found: DType },

    #[error("tensor has been released")]
    Released,

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("empty tensor")]
    Empty,

    #[error("npy: {0}")]
    Npy(String),

    #[error("network definition: {0}")]
    Definition(String),

    #[error("unknown layer type `{0}`")]
    UnknownLayer(String),

    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("missing feed for blob `{0}`")]
    MissingFeed(String),

    #[error("no blob named `{0}`")]
    NoSuchBlob(String),

    #[error("backward called without a preceding train-phase forward")]
    BackwardWithoutForward,

    #[error("parameter file: {0}")]
    ParamFile(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("handshake rejected: {0}")]
    Handshake(String),

    #[error("oracle mismatch: {0}")]
    Oracle(String),

    #[error("transport: {0}")]
    Transport(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn in_layer(self, layer: &str) -> Self {
        match self {
            e @ Error::Layer { .. } => e,
            e => Error::Layer { layer: layer.to_string(), source: Box::new(e) },
        }
    }
}
