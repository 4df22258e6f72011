use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("line {line}: rating {rating} outside 1..={num_classes}")]
    RatingRange {
        line: usize,
        rating: i64,
        num_classes: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenIndex { id: usize, vocab_size: usize },
    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("document has no content tokens")]
    EmptyDocument,
    #[error("entity has no historical documents")]
    ColdEntity,
    #[error("matrix has zero Frobenius norm")]
    DegenerateNorm,
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("missing embedding cache for variant {0}")]
    MissingCache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
