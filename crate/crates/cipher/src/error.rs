use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CipherError>;

#[derive(Debug, Error)]
pub enum CipherError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("insufficient images for class '{class}': need {need}, found {have}")]
    InsufficientImages {
        class: String,
        need: usize,
        have: usize,
    },

    #[error("manifest error at {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("run directory is locked by another command (remove {0} if stale)")]
    Locked(PathBuf),
}

impl CipherError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CipherError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        CipherError::Shape {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
