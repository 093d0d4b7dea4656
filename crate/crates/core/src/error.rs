use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("{0} produced non-finite values")]
    NonFinite(&'static str),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("unknown modality `{0}`")]
    UnknownModality(String),

    #[error("class id {id} out of range for {classes} classes")]
    ClassOutOfRange { id: u32, classes: usize },

    #[error("no evaluated pixels")]
    EmptyConfusion,

    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("tensor file {}: bad magic {found:?}", path.display())]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("tensor file {}: unsupported dtype code {code}", path.display())]
    UnsupportedDtype { path: PathBuf, code: u8 },

    #[error("tensor file {}: truncated (expected {expected} bytes, found {found})", path.display())]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("tensor file {}: {msg}", path.display())]
    Malformed { path: PathBuf, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: usize, msg: String },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used by the command-line front end to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::ConfigLine { .. } | Error::Config(_) | Error::CheckpointMismatch(_) => {
                ErrorKind::Config
            }
            Error::BadMagic { .. }
            | Error::UnsupportedDtype { .. }
            | Error::Truncated { .. }
            | Error::Malformed { .. }
            | Error::Io { .. }
            | Error::Dataset(_) => ErrorKind::Data,
            Error::Divergence { .. } | Error::NonFinite(_) => ErrorKind::Numeric,
            Error::UnknownModality(_) => ErrorKind::Usage,
            _ => ErrorKind::Internal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Config,
    Data,
    Numeric,
    Internal,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
