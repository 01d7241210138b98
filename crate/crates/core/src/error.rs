use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid coupling: {0}")]
    InvalidCoupling(String),

    #[error("invalid law parameters: {0}")]
    InvalidLaw(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("regularization must be positive and finite, got {0}")]
    InvalidEpsilon(f64),

    #[error("invalid cost: {0}")]
    InvalidCost(String),

    #[error("exact transport limited to {cap} atoms in total, got {size}")]
    Capacity { size: usize, cap: usize },

    #[error("support violation: zero mass at cell ({row}, {col})")]
    SupportViolation { row: usize, col: usize },

    #[error("not cyclically invariant: log-density defect {defect:e} at cell ({row}, {col})")]
    NotCyclicallyInvariant { row: usize, col: usize, defect: f64 },

    #[error("empty rectangle: {0}")]
    EmptyRectangle(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("enumeration of {count} cycles exceeds the cap of {cap}")]
    EnumerationCap { count: f64, cap: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
