use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("batch size {0} is too small for a correlation over the batch dimension (need >= 2)")]
    BatchTooSmall(usize),

    #[error("roc_auc needs at least one positive and one negative label")]
    SingleClass,

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("backward called before a training-mode forward pass")]
    BackwardBeforeForward,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no correlation records to analyze")]
    EmptyRecords,

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
