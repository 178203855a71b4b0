use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("coincident points: source and destination are {0} m apart")]
    Coincident(f64),
    #[error("negative threshold {value} at index {index}")]
    NegativeThreshold { index: usize, value: f64 },
    #[error("non-finite value in {stage}")]
    NonFinite { stage: String },
    #[error("degenerate equalizer gain |g| = {0:e}")]
    DegenerateEqualizer(f64),
    #[error("parameter file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("parameter shape mismatch: expected {expected}, found {found}")]
    ParamShape { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
