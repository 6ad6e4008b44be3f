use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("weight file: {0}")]
    Parse(#[from] ParseError),

    #[error("infeasible target: {0}")]
    Infeasible(String),

    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures decoding the binary weight format.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic: expected \"HTXW\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unexpected end of file while reading {0}")]
    UnexpectedEof(&'static str),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("inconsistent dimensions: {0}")]
    InconsistentDims(String),

    #[error("unknown layer kind {0}")]
    UnknownLayerKind(u8),

    #[error("invalid tag: {0}")]
    InvalidTag(String),
}
