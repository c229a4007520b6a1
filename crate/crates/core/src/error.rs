//! Error type shared across the toolkit.
//!
//! Variants map one-to-one onto the CLI exit codes, so library callers and
//! the binary agree on how a failure is classified.

use std::fmt;

/// One invalid manifest line: 1-based line number plus what was wrong.
#[derive(Debug, Clone)]
pub struct LineError {
    pub line: usize,
    pub message: String,
    /// True when the line breaks the train/test protocol (attack leakage)
    /// rather than being merely malformed.
    pub protocol: bool,
}

#[derive(Debug)]
pub enum Error {
    /// Bad arguments, shapes, or configuration. Exit code 2.
    Usage(String),
    /// Train/test protocol violation (e.g. attack samples in a training
    /// split). Exit code 3.
    Protocol(String),
    /// Manifest text that failed validation; carries every bad line.
    /// Exit code 3 if any line is a protocol violation, else 2.
    Manifest(Vec<LineError>),
    /// Filesystem or serialization failure. Exit code 4.
    Io(String),
    /// Non-finite values, divergence, or degenerate numeric input. Exit code 5.
    Numeric(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Protocol(_) => 3,
            Error::Manifest(errors) => {
                if errors.iter().any(|e| e.protocol) {
                    3
                } else {
                    2
                }
            }
            Error::Io(_) => 4,
            Error::Numeric(_) => 5,
        }
    }

    /// Wraps an I/O error with the path it concerned.
    pub fn io(path: &std::path::Path, err: std::io::Error) -> Error {
        Error::Io(format!("{}: {}", path.display(), err))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Usage(msg) => write!(f, "usage: {msg}"),
            Error::Protocol(msg) => write!(f, "protocol violation: {msg}"),
            Error::Manifest(errors) => {
                writeln!(f, "manifest validation failed ({} error(s)):", errors.len())?;
                for e in errors {
                    writeln!(f, "  line {}: {}", e.line, e.message)?;
                }
                Ok(())
            }
            Error::Io(msg) => write!(f, "io: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
