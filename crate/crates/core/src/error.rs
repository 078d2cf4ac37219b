use std::io;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown schedule kind `{0}`")]
    UnknownSchedule(String),
    #[error("index {index} out of range 0..={max}")]
    OutOfRange { index: usize, max: usize },
    #[error("distribution row {row} is not normalized (sum = {sum})")]
    NotNormalized { row: usize, sum: f64 },
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("input of length {len} exceeds the model maximum {max}")]
    Overlength { len: usize, max: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("generation: {0}")]
    Generation(String),
    #[error("enumeration budget exceeded: {needed} leaves > {budget}")]
    Budget { needed: u128, budget: u128 },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-parsable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::UnknownSchedule(_) => "unknown_schedule",
            Error::OutOfRange { .. } => "out_of_range",
            Error::NotNormalized { .. } => "not_normalized",
            Error::NonFinite { .. } => "non_finite",
            Error::Shape(_) => "shape",
            Error::Overlength { .. } => "overlength",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Generation(_) => "generation",
            Error::Budget { .. } => "budget",
            Error::Diverged(_) => "diverged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
