use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated an operation's preconditions (shapes, group ids, counts).
    #[error("usage error: {0}")]
    Usage(String),
    /// A file or byte stream did not match the expected layout.
    #[error("format error: {0}")]
    Format(String),
    /// Non-finite values, failed audits, or diverged training.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}
