use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate track: {0}")]
    DegenerateTrack(String),
    #[error("degenerate view pair: {0}")]
    DegeneratePair(String),
    #[error("cheirality violation: predicted depth {0} not positive")]
    CheiralityViolation(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("loop candidate rejected: {0}")]
    Rejected(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
