use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("SVD did not converge")]
    SvdFailed,
    #[error("matrix expected symmetric, asymmetry {asym:e} exceeds tolerance {tol:e}")]
    NotSymmetric { asym: f64, tol: f64 },
    #[error("Laplacian reduction failed: {0}")]
    RankDeficient(String),
    #[error("graph is not connected (zero is not a simple Laplacian eigenvalue)")]
    Disconnected,
    #[error("LMI problem is infeasible{}", .0.as_ref().map(|d| format!(": {d}")).unwrap_or_default())]
    Infeasible(Option<String>),
    #[error("solver numerical failure: {0}")]
    SolverFailure(String),
    #[error("positive definiteness certification failed: {0}")]
    NotPositiveDefinite(String),
    #[error("simulation diverged at t = {0}")]
    Diverged(f64),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
