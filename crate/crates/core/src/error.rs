use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is at or below {eps:e}")]
    ZeroNorm { norm: f64, eps: f64 },
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid dimension: {0}")]
    InvalidDim(String),
    #[error("class index {index} out of range for {n_classes} classes")]
    BadClassIndex { index: usize, n_classes: usize },
    #[error("bank has no negative labels")]
    NoNegativeLabels,
    #[error("bank has no positive labels")]
    EmptyBank,
    #[error("batch has neither positive nor negative samples")]
    EmptyBatch,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("parameter shape mismatch in `{0}`")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("requested {requested} candidates but lexicon has {available}")]
    TooFewCandidates { requested: usize, available: usize },
    #[error("cannot select {q} top and {q} bottom rows from {rows} crops")]
    QTooLarge { q: usize, rows: usize },
    #[error("input must be positive, got {0}")]
    NonPositiveInput(f64),
    #[error("invalid reference: {0}")]
    InvalidReference(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(expected: usize, got: usize) -> Self {
        Error::DimMismatch { expected, got }
    }
}
