use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("support size {size} exceeds the exact-solver limit of {limit}")]
    SupportTooLarge { size: usize, limit: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("solver diverged: {0}")]
    Diverged(String),
    #[error("minibatch draw {draw} failed: {source}")]
    Draw {
        draw: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("missing labels: {0}")]
    MissingLabels(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
