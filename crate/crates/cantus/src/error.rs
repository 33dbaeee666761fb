use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure modes of the public
/// operations; IO and serialization failures are wrapped for the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("marker line has no closing bracket: {0:?}")]
    MalformedMarker(String),
    #[error("frame counts differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("channel dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("index {index} out of range for vocabulary {vocab}")]
    IndexOutOfRange { index: usize, vocab: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("frame {0} has near-zero norm")]
    DegenerateFrame(usize),
    #[error("sequence length {len} exceeds limit {max}")]
    TooLong { len: usize, max: usize },
    #[error("model configurations do not match: {0}")]
    ConfigMismatch(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("candidate group has {0} members, need at least 2")]
    GroupTooSmall(usize),
    #[error("kv cache capacity {0} exceeded")]
    CapacityExceeded(usize),
    #[error("decode session exhausted after {0} frames")]
    SessionExhausted(usize),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("bad file format: {0}")]
    BadFormat(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
