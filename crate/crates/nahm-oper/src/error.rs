use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rank {0}: need n >= 2")]
    InvalidRank(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("decomposition failed: {0}")]
    Decomposition(String),
    #[error("reducible data; invariant subspace of dimension {}", .basis.ncols())]
    Reducible { basis: crate::lie_core::CMatrix },
    #[error("not converged: {0}")]
    NotConverged(String),
    #[error("config error at {path}: {msg}")]
    Config { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;
