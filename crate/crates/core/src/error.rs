//! Crate-wide error type.

use thiserror::Error;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid dimension: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("softmax row {row} is fully masked: no attendable position")]
    FullyMaskedRow { row: usize },

    #[error("token id {id} at position {position} exceeds vocabulary size {vocab}")]
    IndexOutOfRange {
        position: usize,
        id: usize,
        vocab: usize,
    },

    #[error("cross-entropy target list is empty")]
    EmptyTargets,

    #[error("backward called twice on the same tape without a new forward pass")]
    BackwardAlreadyRun,

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("head count must be at least 1")]
    ZeroHeads,

    #[error("window size must be at least 1 (w=0 leaves the first row empty)")]
    ZeroWindow,

    #[error("{what} must be even, got {value}")]
    OddWidth { what: &'static str, value: usize },

    #[error("sandwich compression ratio for head {head} is zero (equalized h=0 is disallowed)")]
    ZeroCompression { head: usize },

    #[error("invalid positional-scheme parameter: {0}")]
    InvalidScheme(String),

    #[error("sequence length {len} exceeds the precomputed bias table extent {table}")]
    LengthExceedsBias { len: usize, table: usize },

    #[error("corpus too short: need at least {need} tokens in the {region} region, have {have}")]
    CorpusTooShort {
        region: &'static str,
        need: usize,
        have: usize,
    },

    #[error("non-finite gradient in parameter `{param}` at step {step}")]
    NonFiniteGrad { param: String, step: u64 },

    #[error("insufficient eval data: need {need} distinct anchors, only {have} available")]
    InsufficientEvalData { need: usize, have: usize },

    #[error("segment of length {have} is shorter than the requested context {need}")]
    SegmentTooShort { need: usize, have: usize },

    #[error("cache window must be at least 1")]
    ZeroCacheWindow,

    #[error("saliency gradients are identically zero; normalization is undefined")]
    DegenerateGradients,

    #[error("ERF threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),

    #[error("log-curve fit needs at least 2 points with distinct distances")]
    SingularFit,

    #[error("checkpoint file is malformed: {0}")]
    BadCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
