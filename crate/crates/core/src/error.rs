use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("all entries masked in softmax row {row}")]
    AllMaskedRow { row: usize },
    #[error("id {id} out of range for table with {size} rows")]
    IndexOutOfRange { id: usize, size: usize },
    #[error("invalid target row {row}: {reason}")]
    InvalidTarget { row: usize, reason: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already run on this tape")]
    BackwardTwice,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Overlength { len: usize, max: usize },
    #[error("turn index {index} out of range for dialogue with {len} turns")]
    TurnOutOfRange { index: usize, len: usize },
    #[error("line {line}: speaker tag `{tag}` not in {allowed:?}")]
    SpeakerTag {
        line: usize,
        tag: String,
        allowed: Vec<String>,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
