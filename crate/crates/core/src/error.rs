use thiserror::Error;

pub type Result<T, E = AlimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AlimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("lambda must lie in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("beta parameter zeta must be finite and > 0, got {0}")]
    InvalidZeta(f64),
    #[error("normalization input is identically zero")]
    AllZeroInput,
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("sample {index} has no ground-truth label")]
    MissingTruth { index: usize },
    #[error("grid oracle supports at most 4 classes, got {0}")]
    TooManyClasses(usize),
    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),
    #[error("invalid candidate mask: {0}")]
    InvalidMask(String),
    #[error("malformed record at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AlimError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }
}
