use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dims mismatch {left:?} vs {right:?}")]
    DimsMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("value count {got} does not match dims {dims:?}")]
    LengthMismatch { dims: Vec<usize>, got: usize },
    #[error("zero extent in dims {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("{0}")]
    Shape(String),
    #[error("{0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward requires a single-element loss, got dims {0:?}")]
    NotScalar(Vec<usize>),
    #[error("value does not belong to this tape")]
    NotOnTape,
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("missing directory {0}")]
    MissingDirectory(PathBuf),
    #[error("unmatched stems (image without mask or mask without image): {}", .0.join(", "))]
    UnmatchedStems(Vec<String>),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint: truncated payload in {0}")]
    Truncated(String),
    #[error("checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u32 },
    #[error("{0} must not be empty")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
