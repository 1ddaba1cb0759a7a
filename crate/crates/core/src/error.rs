use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corpus has no usable sentence pairs")]
    EmptyCorpus,

    #[error("word {0:?} is not in the pretrained embeddings")]
    OutOfVocabulary(String),

    #[error("shared vocabulary has {shared} words but at least {needed} are required")]
    InsufficientSharedVocab { shared: usize, needed: usize },

    #[error("least-squares system is singular even with ridge damping")]
    Singular,

    #[error("correlation undefined: {0} input is constant")]
    UndefinedCorrelation(&'static str),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint has bad magic bytes")]
    BadMagic,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint is truncated or corrupt: {0}")]
    Truncated(String),

    #[error("checkpoint shape inconsistency: {0}")]
    ShapeInconsistency(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("usage: {0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for usage and I/O problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Usage(_) | Error::Config(_) | Error::Parse { .. } => 2,
            _ => 1,
        }
    }
}
