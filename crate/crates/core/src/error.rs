use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty input set")]
    EmptySet,

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite coordinate in vector {index}")]
    NonFinite { index: usize },

    #[error("outlier budget f={f} invalid for n={n}: {reason}")]
    InvalidOutlierBudget { n: usize, f: usize, reason: &'static str },

    #[error("k={k} out of range 1..={n}")]
    KOutOfRange { k: usize, n: usize },

    #[error("n={n} exceeds the exhaustive enumeration cap of {cap}")]
    EnumerationCapExceeded { n: usize, cap: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no closed-form bounds for rule {0}")]
    NoBounds(String),

    #[error("permutation is not a bijection on 0..{0}")]
    NotABijection(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
