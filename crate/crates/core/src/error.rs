use std::io;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum DicoError {
    /// Caller passed arguments that violate an operation's preconditions.
    #[error("invalid input: {0}")]
    Input(String),
    /// A configuration is inconsistent (unknown regime, vocabulary mismatch, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// A file on disk could not be parsed.
    #[error("malformed data: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DicoError>;

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(DicoError::Input(msg.into()))
}
