//! Library error type. The CLI maps [`Error::exit_code`] onto process exit
//! status: 1 validation, 2 runtime, 3 numeric abort.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus format: {0}")]
    Corpus(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("prompt needs {needed} tokens but cutoff is {cutoff}")]
    Truncation { needed: usize, cutoff: usize },

    #[error("span ({begin},{end}) does not align with token boundaries: {detail}")]
    Alignment {
        begin: usize,
        end: usize,
        detail: String,
    },

    #[error("non-finite value encountered during {0}")]
    Numeric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("adapter: {0}")]
    Adapter(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Corpus(_)
            | Error::Config(_)
            | Error::Validation(_)
            | Error::Truncation { .. }
            | Error::Alignment { .. } => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
