use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong in the library, grouped so the CLI can map
/// each variant onto an exit-code category.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("bracket parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("{path}:{line}: {message}")]
    DataLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid record {id}: {message}")]
    Record { id: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("empty bounding: the first bounding step emitted end-of-bounding")]
    EmptyBounding,

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("model error: {0}")]
    Model(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Parse { .. }
            | Error::DataLine { .. }
            | Error::Record { .. }
            | Error::Data(_)
            | Error::Json(_) => ErrorKind::Data,
            Error::EmptyBounding
            | Error::LengthMismatch { .. }
            | Error::Model(_)
            | Error::Checkpoint(_)
            | Error::Io { .. } => ErrorKind::Runtime,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
