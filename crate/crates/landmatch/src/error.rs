//! Crate-wide error type.

/// Errors produced by the landmatch library.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Underlying I/O failure while reading or writing files.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// File exists but is not a supported or well-formed image/data format.
    #[error("format error: {0}")]
    Format(String),
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A numeric quantity became non-finite; the string names the component.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// Checkpoint container is corrupt or does not match the model config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
