use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the denoising pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("step plan error: {0}")]
    Plan(String),
    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
