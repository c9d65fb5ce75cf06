use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("dropout rate {0} outside [0, 1)")]
    InvalidDropoutRate(f64),

    #[error("invalid optimizer setting: {0}")]
    InvalidOptimizer(String),

    #[error("missing gradient for updatable parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("non-finite loss while probing parameter `{param}` at index {index}")]
    NonFiniteLoss { param: String, index: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("BIO violation at token {token}: {msg}")]
    BioViolation { token: usize, msg: String },

    #[error("tag `{label}` not in the {task} tag set")]
    TagNotInSet { label: String, task: String },

    #[error("empty tag set")]
    EmptyTagSet,

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("empty entity inventory")]
    EmptyInventory,

    #[error("token streams diverge at sentence {sentence}")]
    TokenMisalignment { sentence: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
