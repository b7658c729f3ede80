use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("line {line}: malformed record: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("line {line}: corrupt record: {reason}")]
    CorruptRecord { line: usize, reason: String },

    #[error("line {line}: dimension mismatch: expected {expected}, found {found}")]
    LineDimension {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },

    #[error("line {line}: non-finite component in `{field}`")]
    NonFiniteLine { line: usize, field: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty text")]
    EmptyText,

    #[error("concept index {index} out of range for {n_concepts} concepts")]
    ConceptOutOfRange { index: usize, n_concepts: usize },

    #[error("unrecognized format: {0}")]
    UnrecognizedFormat(String),

    #[error("corrupt parameter file: {0}")]
    CorruptParams(String),

    #[error("non-finite loss at optimizer step {step}")]
    NonFiniteLoss { step: usize },

    #[error(
        "interpolation needs at least 2 steps (alpha undefined for n={0} under alpha_j = j/(n-1))"
    )]
    TooFewSteps(usize),

    #[error("record `{0}` has no token vectors")]
    MissingTokenVectors(String),

    #[error("sentence activates no unmasked concepts along the path")]
    ZeroSelfKernel,

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("class `{class}` has {count} samples, at least {required} required")]
    TooFewSamples {
        class: &'static str,
        count: usize,
        required: usize,
    },

    #[error("probabilities do not sum to 1 (sum = {0})")]
    NotNormalized(f64),

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
