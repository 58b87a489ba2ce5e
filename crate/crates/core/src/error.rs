use thiserror::Error;

/// Errors raised by the fitting, inference and I/O layers.
#[derive(Debug, Error)]
pub enum GflmError {
    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("grid too coarse: {0}")]
    Resolution(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value at row {row}: {detail}")]
    Numeric { row: usize, detail: String },

    #[error("weighted normal equations are singular or not positive definite")]
    RankDeficient,

    #[error("complete separation suspected: coefficient norm {norm:.3e} exceeds 1e4")]
    Separation { norm: f64 },

    #[error("smoothing failed: {0}")]
    Smoothing(String),

    #[error("estimated link collapsed to a constant (range {range:.3e})")]
    DegenerateLink { range: f64 },

    #[error("gamma matrix is ill-conditioned: eigenvalue {lambda:.3e} at index {index}")]
    Conditioning { index: usize, lambda: f64 },

    #[error("order selection failed: {0}")]
    Selection(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for GflmError {
    fn from(err: csv::Error) -> Self {
        let line = err
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or_default();
        GflmError::Parse {
            line,
            detail: err.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, GflmError>;
