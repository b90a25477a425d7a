use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KnorError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KnorError {
    #[error("I/O error on {path} at byte offset {offset}: {source}")]
    Io {
        path: PathBuf,
        offset: u64,
        #[source]
        source: io::Error,
    },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    MagicMismatch {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported matrix file version {0}")]
    UnsupportedVersion(u32),

    #[error("unknown dtype code {0}")]
    UnknownDtype(u32),

    #[error("length mismatch for {path}: expected {expected} bytes, found {actual}")]
    LengthMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, found {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot merge an empty accumulator list")]
    EmptyMerge,

    #[error("task queue is not empty ({0} tasks pending)")]
    QueueNotEmpty(usize),

    #[error("row {row} out of range for {n} rows")]
    RowOutOfRange { row: usize, n: usize },

    #[error("short read at page {page}: {source}")]
    ShortRead {
        page: u64,
        #[source]
        source: io::Error,
    },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<KnorError>,
    },
}

impl KnorError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        KnorError::InvalidConfig(msg.into())
    }
}
