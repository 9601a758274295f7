use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Every variant has a short machine-readable [`kind`](Error::kind) so the
/// CLI can print a stable single-line prefix.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at index {index}: {context}")]
    NonFinite { index: usize, context: String },

    #[error("insufficient history: need index >= {needed}, got {got}")]
    InsufficientHistory { needed: usize, got: usize },

    #[error("stale forward tape: {0}")]
    StaleTape(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("metadata mismatch: {0}")]
    MetadataMismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::Shape(_) => "shape",
            Error::NonFinite { .. } => "non-finite",
            Error::InsufficientHistory { .. } => "insufficient-history",
            Error::StaleTape(_) => "stale-tape",
            Error::Diverged { .. } => "diverged",
            Error::MetadataMismatch(_) => "metadata-mismatch",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Returns an error naming the first non-finite entry of `values`.
pub(crate) fn ensure_finite<T: Into<f64> + Copy>(values: &[T], context: &str) -> Result<()> {
    match values.iter().position(|v| !(*v).into().is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            context: context.to_string(),
        }),
        None => Ok(()),
    }
}
