use thiserror::Error;

use crate::linalg::Mat;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("reducing-matrix iteration did not converge after {iterations} steps (achieved ratio {achieved_ratio})")]
    ReducerNonConvergence {
        iterations: usize,
        achieved_ratio: f64,
        last: Box<Mat>,
    },

    #[error("power iteration did not converge after {iterations} steps (last Rayleigh quotient {rayleigh})")]
    EstimatorNonConvergence { iterations: usize, rayleigh: f64 },

    #[error("degenerate regression: {0}")]
    DegenerateFit(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
