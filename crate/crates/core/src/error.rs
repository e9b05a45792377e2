use thiserror::Error;

#[derive(Debug, Error)]
pub enum GtaError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown format: {0}")]
    UnknownFormat(String),
    #[error("unknown architecture: {0}")]
    UnknownArchitecture(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GtaError>;
