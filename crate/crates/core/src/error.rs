use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}: empty sequence")]
    EmptySequence(&'static str),

    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("computation record ordering violated: {0}")]
    Ordering(String),

    #[error("sequence length {len} exceeds capacity {max}")]
    Length { len: usize, max: usize },

    #[error("no room to generate: prompt length {prompt} leaves no space below {max}")]
    Capacity { prompt: usize, max: usize },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("trace has no target positions to score")]
    EmptyTarget,

    #[error("invalid state: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite loss at step {step}: ce={ce}, quantile={quantile}")]
    NonFiniteLoss { step: u64, ce: f64, quantile: f64 },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("checkpoint integrity failure: {0}")]
    Integrity(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
