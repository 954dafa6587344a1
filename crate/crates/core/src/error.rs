use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LsimError>;

#[derive(Debug, Error)]
pub enum LsimError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("duplicate id `{id}` (line {line})")]
    DuplicateId { id: String, line: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid chain: {0}")]
    InvalidChain(String),

    #[error("unknown node id `{0}`")]
    UnknownNode(String),

    #[error("encoder error: {0}")]
    Encoder(String),

    #[error("llm error: {0}")]
    Llm(String),

    #[error("llm failed after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },

    #[error("unparseable llm output: {0:?}")]
    Unparseable(String),

    #[error("template is missing the `{0}` placeholder")]
    MissingPlaceholder(String),

    #[error("missing upstream artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
