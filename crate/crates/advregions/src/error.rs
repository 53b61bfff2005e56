//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bad magic {found:#010x} in {path} (expected {expected:#010x})")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("truncated file {path}: needed {needed} bytes, got {got}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        got: usize,
    },

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unsupported model file: {0}")]
    BadModelFile(String),

    #[error("empty adversarial set: {0}")]
    EmptySet(String),

    #[error("interval rank {b} out of range 1..={m}")]
    RankOutOfRange { b: usize, m: usize },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
