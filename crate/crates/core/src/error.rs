use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid sizes, bounds or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// A message or dataset violates the one-shot protocol contracts.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    /// A binary record or checkpoint could not be decoded.
    #[error("malformed record: {0}")]
    Format(String),

    /// Config text failed to parse; `line` is 1-based.
    #[error("line {line}{}: {message}", key.as_ref().map(|k| format!(" (key `{k}`)")).unwrap_or_default())]
    Parse {
        line: usize,
        key: Option<String>,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}
