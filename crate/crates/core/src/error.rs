use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid side must be at least 2, got {0}")]
    GridTooSmall(usize),
    #[error("grid of side {side} needs {expected} values, got {got}")]
    GridShape { side: usize, expected: usize, got: usize },
    #[error("grid contains a non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("zero-norm vector in cosine similarity ({0})")]
    ZeroNorm(String),
    #[error("empty head list")]
    NoHeads,
    #[error("attention map has no mass")]
    ZeroMass,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("refusing post-softmax map for the spatial-entropy loss (head {0})")]
    PostSoftmaxMap(usize),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
