use thiserror::Error;

/// Errors raised anywhere in the generator stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable does not belong to the live tape")]
    BrokenTape,
    #[error("segment list is empty")]
    EmptySegmentList,
    #[error("scene planning produced no segments")]
    EmptyScene,
    #[error("index {index} out of range for {len} segments")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("count mismatch: expected {expected}, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("noise level {level} does not divide resolution {res}")]
    BadResolution { level: usize, res: usize },
    #[error("every segment has zero mass")]
    AllSegmentsSkipped,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint entry {name}: {detail}")]
    CorruptEntry { name: String, detail: String },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("too few probes: {got} < {min}")]
    TooFewProbes { got: usize, min: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch { op, detail: detail.into() }
}
