use thiserror::Error;

/// Errors produced anywhere in the localization pipeline.
#[derive(Debug, Error)]
pub enum DipsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Input carries no usable structure (e.g. a constant attention map).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    #[error("training aborted: loss term `{term}` is not finite ({value})")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("image codec error: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DipsError>;

pub(crate) fn invalid_input(msg: impl Into<String>) -> DipsError {
    DipsError::InvalidInput(msg.into())
}

pub(crate) fn invalid_param(msg: impl Into<String>) -> DipsError {
    DipsError::InvalidParameter(msg.into())
}
