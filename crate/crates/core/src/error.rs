use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence of length {len} exceeds context length {context_len}")]
    SequenceTooLong { len: usize, context_len: usize },

    #[error("non-finite value in tensor `{tensor}` at step {step}")]
    NonFinite { tensor: String, step: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("tokenizer file error at line {line}: {msg}")]
    TokenizerFormat { line: usize, msg: String },

    #[error("translation failed for all {count} records; first failure: {first}")]
    AllTranslationsFailed { count: usize, first: String },

    #[error("self-instruct accepted nothing after {attempts} attempts ({rejected_similar} too similar, {unparseable} unparseable)")]
    NoAcceptedInstructions {
        attempts: usize,
        rejected_similar: usize,
        unparseable: usize,
    },

    #[error("missing scores: {0}")]
    MissingScores(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
