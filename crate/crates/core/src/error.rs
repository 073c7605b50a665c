use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("token {token} out of range for vocabulary of size {size} in utterance {utt_id:?}")]
    TokenOutOfRange {
        utt_id: String,
        token: u32,
        size: usize,
    },

    #[error("utterance {utt_id:?} is empty after run deduplication")]
    EmptyUtterance { utt_id: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("reserved id {token} present in input utterance {utt_id:?}")]
    ReservedInInput { utt_id: String, token: u32 },

    #[error("invalid corruption spec: {0}")]
    CorruptionSpec(String),

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("sequence of length {len} exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },

    #[error("non-finite logits passed to sampler")]
    NonFiniteLogits,

    #[error("invalid sampling request: {0}")]
    Sampling(String),

    #[error("loss mask selects no positions")]
    AllMasked,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("utterance {utt_id:?}: frame {frame} has {got} groups, expected {expected}")]
    GroupCount {
        utt_id: String,
        frame: usize,
        got: usize,
        expected: usize,
    },

    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error("invalid markov table: {0}")]
    MarkovTable(String),

    #[error("invalid accent rules: {0}")]
    AccentRules(String),

    #[error("unknown style {style} (codec has {count} styles)")]
    UnknownStyle { style: usize, count: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing path {0}")]
    MissingPath(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NonFinite { .. } | Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
