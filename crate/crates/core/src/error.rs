use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// The variants line up with the CLI exit codes (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("validation failed for {field}: {message}")]
    Validation { field: String, message: String },

    #[error("{path}:{line}: {message}")]
    Corpus {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("backend transport: {0}")]
    Transport(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code used by the `mole` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Validation { .. } | Error::Corpus { .. } => 4,
            Error::Shape { .. } | Error::Range(_) => 5,
            Error::ConfigMismatch(_) => 6,
            Error::Transport(_) => 7,
            Error::Degenerate(_) | Error::Contract(_) => 8,
            Error::Format(_) => 9,
            Error::Config(_) => 10,
        }
    }
}
