use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("vocabulary too small for negative sampling: {size} tokens, need at least {needed}")]
    VocabularyTooSmall { size: usize, needed: usize },
    #[error("zero vector for token {0:?}")]
    ZeroRow(String),
    #[error("degenerate: fewer than 2 rows")]
    DegenerateMatrix,
    #[error("no identical tokens; cannot seed")]
    NoIdenticalTokens,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty dictionary")]
    EmptyDictionary,
    #[error("no evaluable pairs")]
    NoEvaluablePairs,
    #[error("token id {id} at position {position} is out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { position: usize, id: usize, vocab_size: usize },
    #[error("sequence length {len} exceeds max positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("backward already run on this tape; reset it first")]
    BackwardTwice,
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("missing embedding rows for tokens: {0:?}")]
    MissingRows(Vec<String>),
    #[error("length mismatch: {hyp} hypotheses vs {refs} references")]
    LengthMismatch { hyp: usize, refs: usize },
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("malformed {what} at line {line}: {msg}")]
    Parse { what: &'static str, line: usize, msg: String },
    #[error("corrupt artifact {path}: {msg}")]
    CorruptArtifact { path: PathBuf, msg: String },
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors raised by configuration or input validation, as
    /// opposed to failures while computing.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::InvalidArgument(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
