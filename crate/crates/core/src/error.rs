use std::path::PathBuf;

/// Errors produced by the steering toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{0} is empty")]
    Empty(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no word of {what} projects onto the vocabulary ({unprojected} unprojected)")]
    Unprojectable { what: String, unprojected: usize },

    #[error("invalid {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },

    #[error("history holds {length} positions but the model context is {capacity}; truncate or window the history")]
    ContextOverflow { length: usize, capacity: usize },

    #[error("token id {token} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("corpus has {got} tokens, at least {min} are required")]
    CorpusTooSmall { got: usize, min: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("csv output: {0}")]
    Csv(String),

    #[error("generation cancelled after {0} tokens")]
    Cancelled(usize),

    #[error("sequence of {0} tokens is too short, at least 2 are required")]
    SequenceTooShort(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
