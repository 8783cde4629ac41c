//! Error type shared across the crate.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor operations, graph construction, inference,
/// training and file I/O.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor operation received operands with incompatible dimensions.
    Shape(String),
    /// A parameter value is out of its valid range.
    Param(String),
    /// Graph construction failed (missing tap, invalid width/group combo, ...).
    Build(String),
    /// An operation was invoked on a graph or mode it does not support.
    Usage(String),
    /// A file could not be parsed; `offset` is the byte position of the problem.
    Parse { offset: usize, message: String },
    /// An I/O failure while reading or writing files.
    Io(String),
    /// Training aborted because the loss became non-finite.
    Diverged { iteration: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Param(m) => write!(f, "parameter error: {m}"),
            Error::Build(m) => write!(f, "construction error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Parse { offset, message } => {
                write!(f, "parse error at byte {offset}: {message}")
            }
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::Diverged { iteration } => {
                write!(f, "training diverged (non-finite loss) at iteration {iteration}")
            }
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
