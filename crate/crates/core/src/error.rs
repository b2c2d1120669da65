use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid conversation {conv_id}: {reason}")]
    InvalidConversation { conv_id: String, reason: String },

    #[error("max_len {max_len} cannot hold [CLS] plus the final utterance ({needed} tokens)")]
    FinalUtteranceTooLong { max_len: usize, needed: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("noise pool too small: {0}")]
    NoisePoolTooSmall(String),

    #[error("non-finite loss in {term} at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("vocabulary hash mismatch: checkpoint has {expected}, supplied vocabulary is {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing config key `{0}`")]
    MissingConfigKey(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
