use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical error in {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state error: {0}")]
    State(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Broad classes used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// Prefix the context of a numerical error, leaving other kinds untouched.
    pub fn with_context(self, prefix: &str) -> Self {
        match self {
            Error::Numerical { context, detail } => Error::Numerical {
                context: format!("{prefix}: {context}"),
                detail,
            },
            Error::State(msg) => Error::State(format!("{prefix}: {msg}")),
            Error::Format(msg) => Error::Format(format!("{prefix}: {msg}")),
            other => other,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Numerical { .. } => ErrorClass::Numerical,
            Error::Shape(_)
            | Error::Domain(_)
            | Error::State(_)
            | Error::Format(_)
            | Error::Io { .. } => ErrorClass::Data,
        }
    }

    /// Exit code for the command-line front end: 1 config, 2 data/I/O, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Config => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numerical => 3,
        }
    }
}
