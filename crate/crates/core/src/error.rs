use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unsupported kernel size {0} (only 1x1 and 3x3 are accepted)")]
    KernelSize(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("unsupported topology: {0}")]
    Topology(String),

    #[error("explicit operator too large: {entries} entries exceeds the limit of {limit}")]
    TooLarge { entries: usize, limit: usize },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("cycle detected at graph node {0}")]
    Cycle(usize),

    #[error("trace was not recorded for this pursuit run")]
    TraceDisabled,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("data: {0}")]
    Data(String),

    #[error("config: {0}")]
    Config(String),

    #[error("numeric incident: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
