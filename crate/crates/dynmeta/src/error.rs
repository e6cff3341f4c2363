//! Error taxonomy shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimension or extent mismatch (zero extents, incompatible shapes).
    #[error("shape error: {0}")]
    Shape(String),

    /// Out-of-range index, e.g. a class target outside [0, C).
    #[error("index error: {0}")]
    Index(String),

    /// An operation contract was violated (non-scalar loss, mismatched layer sets).
    #[error("contract error: {0}")]
    Contract(String),

    /// A tensor handle was used with a tape it does not belong to.
    #[error("tape error: {0}")]
    Tape(String),

    /// Invalid argument value (k > n, ratio out of range, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Malformed input data (bad image header, mixed sizes, empty class dir).
    #[error("format error: {0}")]
    Format(String),

    /// Numerically degenerate input (rank-0 activation matrix).
    #[error("degenerate error: {0}")]
    Degenerate(String),

    /// Non-finite value produced where finiteness is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Config file problem, with the 1-based line it occurred on.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Checkpoint magic/version/layout problem.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
