use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("log_sum_exp of an empty list")]
    EmptyInput,

    #[error("NaN in softmax input at index {0}")]
    NotANumber(usize),

    #[error("cannot draw {requested} items: only {support} have positive weight")]
    InsufficientSupport { requested: usize, support: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} is outside the lattice label set")]
    LabelNotInLattice { label: usize },

    #[error("target label {label} equals the blank id")]
    BlankInTarget { label: usize },

    #[error("label {label} out of range for vocabulary of size {vocab_size}")]
    LabelOutOfRange { label: usize, vocab_size: usize },

    #[error("lattice has zero frames")]
    NoFrames,

    #[error("target of length {target_len} needs at least {required} frames, got {frames}")]
    Unreachable {
        target_len: usize,
        required: usize,
        frames: usize,
    },

    #[error("instance too large for enumeration: {0}")]
    TooLarge(String),

    #[error("positive set covers the whole vocabulary of size {0}")]
    NoNegatives(usize),

    #[error("sample size {total_size} is smaller than the positive set ({positive}); raise the total size")]
    PositiveOverflow { total_size: usize, positive: usize },

    #[error("sample size {total_size} exceeds vocabulary size {vocab_size}")]
    SampleExceedsVocab { total_size: usize, vocab_size: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: {msg}")]
    File { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::File {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
