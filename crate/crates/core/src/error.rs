use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("fully-masked row {row}: every attention entry is blocked")]
    FullyMaskedRow { row: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("tensor `{tensor}` has shape {found:?}, expected {expected:?}")]
    TensorShape { tensor: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("plan out of range: {0}")]
    PlanOutOfRange(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("subject {subject:?} not found in {text:?}")]
    SubjectNotFound { subject: String, text: String },

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("bad magic bytes {found:?}, expected \"RPWT\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("line {line}: {message}")]
    Dataset { line: usize, message: String },

    #[error("empty query")]
    EmptyQuery,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("base probability is zero; query cannot be measured")]
    ZeroBaseProbability,

    #[error("saliency scores are all zero")]
    DegenerateSaliency,

    #[error("gradient attribution does not support representation patches")]
    PatchedTrace,

    #[error("trace is missing {0}; re-run the forward pass with that gauge enabled")]
    MissingGauge(&'static str),

    #[error("unknown experiment kind {0:?}")]
    UnknownExperiment(String),

    #[error("experiment {0} requires a corpus")]
    MissingCorpus(&'static str),

    #[error("no queries survived the correctness filter")]
    NoSurvivors,

    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the filesystem rather than of the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::File { .. })
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File { path: path.into(), source }
    }
}
