use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss does not depend on any trainable input")]
    Disconnected,

    #[error("gradient check failed: {0}")]
    Gradcheck(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("checkpoint stage mismatch: expected {expected}, found {found}")]
    Stage {
        expected: &'static str,
        found: &'static str,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Corrupt(_) | Error::Version { .. } => 2,
            Error::NonFinite { .. } | Error::Gradcheck(_) => 3,
            Error::Shape { .. }
            | Error::InvalidConfig(_)
            | Error::InvalidArgument(_)
            | Error::Disconnected
            | Error::Stage { .. } => 1,
        }
    }
}
