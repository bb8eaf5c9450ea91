use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("matrix is not positive definite (smallest eigenvalue {eigenvalue:e})")]
    Definiteness { eigenvalue: f64 },

    #[error("rank error: rank {rank} must lie in 1..={max}")]
    Rank { rank: usize, max: usize },

    #[error("normalization error: column {column} has norm {norm}")]
    Normalization { column: usize, norm: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("feasibility error: {0}")]
    Feasibility(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("sharing error: {0}")]
    Sharing(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
