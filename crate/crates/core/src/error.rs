use std::path::PathBuf;

use crate::mdp::TokenId;

/// Errors raised by the alignment pipeline.
#[derive(Debug, thiserror::Error)]
pub enum PadError {
    #[error("state is terminal; no further tokens can be appended")]
    TerminalState,
    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    BadToken { token: TokenId, vocab_size: usize },
    #[error("invalid vocabulary: {0}")]
    BadVocab(String),
    #[error("invalid state: {0}")]
    BadState(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("parameters are frozen: {0}")]
    FrozenParameters(&'static str),
    #[error("training stages out of order: {0}")]
    StageOrder(String),
    #[error("unknown preference dimension `{0}`")]
    UnknownDimension(String),
    #[error("run lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("runs are not paired by prompt at index {0}")]
    PairingMismatch(usize),
    #[error("invalid specification: {0}")]
    BadSpec(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("schema mismatch in {path}: {detail}")]
    Schema { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, PadError>;

impl PadError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PadError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        PadError::Json {
            path: path.into(),
            source,
        }
    }
}
