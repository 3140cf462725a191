//! File formats: binary netpbm images, association dumps and config files.

pub mod assoc;
pub mod config;
pub mod netpbm;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{kind}: {msg}")]
    Malformed { kind: &'static str, msg: String },

    #[error("{kind}: file ends early")]
    Truncated { kind: &'static str },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
}

impl FormatError {
    pub(crate) fn malformed(kind: &'static str, msg: impl Into<String>) -> Self {
        FormatError::Malformed {
            kind,
            msg: msg.into(),
        }
    }
}
