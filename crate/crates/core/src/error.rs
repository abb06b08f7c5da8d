use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument is outside what the operation accepts.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Input values lie outside the mathematical domain (negative mass, bad distribution).
    #[error("domain error: {0}")]
    Domain(String),

    /// Configuration that cannot be built into a model or run.
    #[error("configuration error: {0}")]
    Config(String),

    /// Failure during optimization.
    #[error("training error: {0}")]
    Training(String),

    /// Malformed serialized data.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
