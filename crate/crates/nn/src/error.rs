use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("model dimension {dim} is not divisible by {heads} heads")]
    HeadsDivisibility { dim: usize, heads: usize },
    #[error("attention row {row} has every key masked")]
    AllMaskedRow { row: usize },
    #[error("attention pooling row {row} has no valid tokens")]
    NoValidTokens { row: usize },
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NnError {
    NnError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}
