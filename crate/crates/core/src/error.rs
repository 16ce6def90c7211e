use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid problem: {0}")]
    Invalid(String),

    #[error("innovation covariance at step {step} is numerically singular (condition number {condition:.3e})")]
    IllPosedObservation { step: usize, condition: f64 },

    #[error("matrix is not symmetric: asymmetry {0:.3e}")]
    Asymmetric(f64),

    #[error("terminal covariance bound is not above the filter error covariance: min eigenvalue of P_f - P_N error cov is {min_eigenvalue:.6e}")]
    Precheck { min_eigenvalue: f64 },

    #[error("layout inconsistency: {0}")]
    Layout(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
