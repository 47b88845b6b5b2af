//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus: no texts provided")]
    EmptyCorpus,

    #[error("vocabulary capacity {0} cannot hold the 4 reserved special tokens")]
    VocabTooSmall(usize),

    #[error("dataset {path}, line {line}: {msg}")]
    Dataset {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("duplicate instance id '{0}'")]
    DuplicateInstanceId(String),

    #[error("duplicate document id '{0}' in dataset")]
    DuplicateDocumentId(String),

    #[error("instance '{instance}': document id '{doc}' appears in both the positive and the negative set")]
    OverlappingDocument { instance: String, doc: String },

    #[error("instance '{0}': positive set is empty")]
    EmptyPositiveSet(String),

    #[error("document '{0}': no tokens after tokenization")]
    EmptyDocument(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSyntheticSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("no training pairs provided")]
    EmptyTrainingSet,

    #[error("question '{0}' has no tokens")]
    EmptyQuestion(String),

    #[error("context of length {len} exceeds the maximum context {max}")]
    ContextTooLong { len: usize, max: usize },

    #[error("empty context passed to the generator")]
    EmptyContext,

    #[error("sequence cannot fit: question span of {question} tokens leaves no room in a context of {max}")]
    SequenceTooLong { question: usize, max: usize },

    #[error("hidden dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("vocabulary size mismatch: expected {expected}, got {got}")]
    VocabMismatch { expected: usize, got: usize },

    #[error("chosen token {token} has zero probability mass; the sampler must only draw in-support tokens")]
    ZeroMassToken { token: u32 },

    #[error("oracle critic requires an oracle positive question, instance '{0}' has none")]
    MissingOracleQuestion(String),

    #[error("empty decode trace")]
    EmptyTrace,

    #[error("precision cutoff {k} exceeds ranking length {len}")]
    PrecisionCutoffTooLarge { k: usize, len: usize },

    #[error("rankings need at least one relevant document")]
    NoRelevantDocuments,

    #[error("ranked list has {got} relevant entries but only {expected} were declared")]
    TooManyRelevant { expected: usize, got: usize },

    #[error("search index is empty")]
    EmptyIndex,

    #[error("question retrieval returned no candidates for any document")]
    NoRetrievedQuestions,

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
