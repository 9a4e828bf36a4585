use thiserror::Error;

/// Errors produced by the simulator library.
#[derive(Debug, Error)]
pub enum FedError {
    /// Invalid model, experiment or mask configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data that violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),

    /// Malformed binary input, with the byte offset where decoding failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A configuration key or value rejected while parsing user input.
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FedError>;

pub(crate) fn config_err(msg: impl Into<String>) -> FedError {
    FedError::Config(msg.into())
}

pub(crate) fn input_err(msg: impl Into<String>) -> FedError {
    FedError::Input(msg.into())
}
