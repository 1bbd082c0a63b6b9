use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's shape or value contract.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Spatial dimensions are not compatible with the strides of the network.
    #[error("sizing error in {op}: {detail}")]
    Sizing { op: &'static str, detail: String },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: file has version {found}, this build reads version {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("mask generation failed: {0}")]
    MaskGeneration(String),

    #[error("worker thread failed: {0}")]
    Worker(String),

    #[error("hole ratio {0:.4} lies outside the 0-60% protocol")]
    OutOfProtocol(f64),

    #[error("non-PSD covariance: eigenvalue {0:e}")]
    NotPsd(f64),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Contract { op, detail: detail.into() })
}

pub(crate) fn sizing<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Sizing { op, detail: detail.into() })
}
