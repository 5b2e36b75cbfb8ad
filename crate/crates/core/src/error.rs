use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("gain is not mean-square stabilizing (rho = {rho})")]
    Unstable { rho: f64 },

    #[error("eigenvalue computation did not converge: {0}")]
    EigenSolve(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("not mean-square stabilizable at this noise level: {0}")]
    NotStabilizable(String),

    #[error("no productive step after {halvings} halvings")]
    NoProductiveStep { halvings: usize },

    #[error(
        "rollout batch rejected: perturbed gain {index} is mean-square destabilizing \
         (rho = {rho}); shrink the exploration radius"
    )]
    BatchRejected { index: usize, rho: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid problem: {}", .0.join("; "))]
    InvalidProblem(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
