use thiserror::Error;

/// Errors raised anywhere in the spinodoid pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("stiffness is not invertible (condition number {0:.3e})")]
    SingularStiffness(f64),

    #[error("invalid structure parameters: {0}")]
    InvalidParams(String),

    #[error("value outside its domain: {0}")]
    Domain(String),

    #[error("wave-vector rejection budget exhausted after {draws} draws ({accepted} accepted)")]
    RejectionBudget { draws: u64, accepted: usize },

    #[error("solver did not converge within {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown zero pattern `{0}`")]
    UnknownZeroPattern(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("all {0} training restarts failed")]
    AllRestartsFailed(usize),

    #[error("no feasible design in any subdomain")]
    Infeasible,

    #[error("format error: {0}")]
    Format(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
