use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("qrels reference unknown answer ids: {}", .0.join(", "))]
    DanglingAnswers(Vec<String>),

    #[error("question `{0}` has no candidate list")]
    MissingCandidates(String),

    #[error("unknown document id `{0}`")]
    UnknownDocument(String),

    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,

    #[error("document `{0}` has no tokens")]
    EmptyDocument(String),

    #[error("split counts {requested} do not sum to the {available} available questions")]
    SplitMismatch { requested: usize, available: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence has no unmasked positions")]
    EmptySequence,

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("no masked positions to score")]
    NoMaskedPositions,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("vocabulary hash mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("run file inconsistency at line {line}: {message}")]
    RunInconsistent { line: usize, message: String },

    #[error("question `{0}` in run has no relevance judgments")]
    Unjudged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn malformed(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
