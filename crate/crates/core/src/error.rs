use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shapes {lhs} and {rhs} are incompatible")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tape: {0}")]
    Tape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("non-finite loss {loss} at iteration {iter}")]
    NonFiniteLoss { iter: u64, loss: f64 },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("integrity check failed: stored crc32 {stored:#010x}, computed {computed:#010x}")]
    HashMismatch { stored: u32, computed: u32 },

    #[error("unknown tensor `{0}` in checkpoint")]
    UnknownTensor(String),

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {found}, expected {expected}")]
    ShapeMismatch {
        name: String,
        found: Shape,
        expected: Shape,
    },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}
