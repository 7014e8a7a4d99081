use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the decoding pipeline.
#[derive(Debug, Error)]
pub enum NslError {
    #[error("invalid pattern spec: {0}")]
    InvalidSpec(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty validity mask: {0}")]
    EmptyMask(String),
    #[error("degenerate scene: nothing visible from the left camera")]
    EmptyScene,
    #[error("input missing for matcher mode {mode}: {what}")]
    Mode { mode: String, what: String },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("corrupt sample at {path}: {reason}")]
    CorruptSample { path: PathBuf, reason: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, NslError>;

impl NslError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NslError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        NslError::CorruptSample {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            NslError::InvalidSpec(_) | NslError::Config(_) | NslError::Mode { .. }
        )
    }
}
