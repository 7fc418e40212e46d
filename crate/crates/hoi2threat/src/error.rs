//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or argument values.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset file violates the `td-hoi/1` schema.
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    /// A domain invariant was violated at runtime.
    #[error("{0}")]
    Invariant(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    /// Remote judge endpoint failure after retries.
    #[error("judge error: {0}")]
    Judge(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }

    pub fn schema(line: usize, msg: impl Into<String>) -> Self {
        Error::Schema { line, message: msg.into() }
    }
}
