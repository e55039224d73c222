use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("point outside the model domain: {0}")]
    Domain(String),

    #[error("invalid polytope: {0}")]
    InvalidPolytope(String),

    #[error("polytope is unbounded")]
    Unbounded,

    #[error("polytope is empty")]
    Empty,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("fixed-point iteration did not converge after {sweeps} sweeps (residual {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("missing curvature bound for the linearization")]
    MissingCurvature,

    #[error("initial feasibility assumption violated (first verification returned {value:e}, status {status})")]
    InitialInfeasible { value: f64, status: String },

    #[error("parse error at row {row}: {detail}")]
    Parse { row: usize, detail: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
