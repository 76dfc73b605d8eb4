use thiserror::Error;

#[derive(Debug, Error)]
pub enum MmdError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("horizon mismatch: {0}")]
    HorizonMismatch(String),
    #[error("time {t} outside trajectory span [0, {end}]")]
    TimeOutOfRange { t: f64, end: f64 },
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("no path found: {0}")]
    NoPath(String),
    #[error("time limit of {0:.1} s exceeded")]
    TimeLimit(f64),
    #[error("node limit of {0} exceeded")]
    NodeLimit(usize),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MmdError>;
