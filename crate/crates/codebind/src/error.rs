//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero vector: norm {norm:.3e} below threshold")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("k-means: k={k} exceeds number of distinct points {distinct}")]
    KExceedsPoints { k: usize, distinct: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("batch size mismatch: {left} vs {right}")]
    BatchMismatch { left: usize, right: usize },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("batch too small: need at least {need}, got {got}")]
    BatchTooSmall { need: usize, got: usize },

    #[error("codebook too small: need at least {need} entries, got {got}")]
    CodebookTooSmall { need: usize, got: usize },

    #[error("balancer: observed losses missing the align term")]
    MissingAlignTerm,

    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing prototype for concept {0}")]
    MissingPrototype(u32),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(&'static str),

    #[error("text-modality trace has no specific component")]
    MissingSpecific,

    #[error("incomplete trace: {0}")]
    IncompleteTrace(&'static str),

    #[error("shape mismatch in {context}: {left} vs {right}")]
    ShapeMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
