use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty tensor")]
    EmptyTensor,
    #[error("non-finite input")]
    NonFinite,
    #[error("value range overflows the scalar type")]
    RangeOverflow,
    #[error("shape {shape:?} does not match {len} values")]
    ShapeLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("invalid bit-width {0}: expected 2..=8")]
    InvalidBitWidth(i64),
    #[error("code {code} outside [{qmin}, {qmax}]")]
    CodeOutOfRange { code: i64, qmin: i32, qmax: i32 },

    #[error("manifest not found: {}", .0.display())]
    ManifestNotFound(PathBuf),
    #[error("blob not found: {0}")]
    BlobNotFound(String),
    #[error("shape/blob mismatch in {name}: expected {expected} bytes, found {found}")]
    ShapeBlobMismatch {
        name: String,
        expected: u64,
        found: u64,
    },
    #[error("duplicate layer: {0}")]
    DuplicateLayer(String),
    #[error("non-contiguous positions: {0:?}")]
    NonContiguousPositions(Vec<usize>),
    #[error("non-finite weight in {0}")]
    NonFiniteWeight(String),
    #[error("unsupported dtype {dtype:?} in {name}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("model has no layers")]
    EmptyModel,
    #[error("synthetic model spec has zero layers")]
    NoSyntheticLayers,

    #[error("baseline bit-width 8 required")]
    MissingBaseline,
    #[error("duplicate bit-width {0}")]
    DuplicateBitWidth(u8),
    #[error("no bit-widths given")]
    NoBitWidths,
    #[error("QEM must be positive and finite, got {0}")]
    InvalidQem(f64),
    #[error("empty QEM list")]
    NoQems,
    #[error("error table: {0}")]
    InvalidErrorTable(String),
    #[error("allocation does not cover layer {0}")]
    AllocationMissingLayer(String),
    #[error("allocation names unknown layer {0}")]
    AllocationUnknownLayer(String),

    #[error("network layer {layer}: {reason}")]
    Network { layer: String, reason: String },
    #[error("batch shape {got:?} does not match network input {expected:?}")]
    BatchShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("weight sets differ: {0}")]
    MismatchedLayers(String),
    #[error("top-k must be at least 1")]
    InvalidTopK,
    #[error("at least 3 bit-widths are required, got {0}")]
    TooFewPoints(usize),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
