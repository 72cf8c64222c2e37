use thiserror::Error;

/// Errors raised across the relay selection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("lambert W0 is undefined for x = {0} < -1/e")]
    LambertDomain(f64),

    #[error("infeasible: EH time {tau0:e} s cannot fund demand (limit {limit:e} s)")]
    Infeasible { tau0: f64, limit: f64 },

    #[error("enumeration of {count} assignments exceeds cap {cap}")]
    EnumerationCap { count: u128, cap: u64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported network size n={n}, k={k}")]
    Unsupported { n: usize, k: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
