//! Crate-wide error type.

use std::fmt;
use std::io;

/// Unified error for every fallible operation in the crate.
#[derive(Debug)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    Shape(String),
    /// A configuration or argument value is out of its legal range.
    Param(String),
    /// A mathematical domain violation (log of a non-positive value, ...).
    Domain(String),
    /// A non-finite value surfaced where a finite one is required.
    Numeric(String),
    /// A serialized artifact is malformed; `offset` is the byte position
    /// at which decoding failed.
    Format {
        offset: u64,
        message: String,
    },
    /// A pipeline or harness stage could not run to completion.
    Run(String),
    Io(io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Param(m) => write!(f, "parameter error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Error::Run(m) => write!(f, "run error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}
