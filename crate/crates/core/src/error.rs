use thiserror::Error;

/// Errors produced by the simulator and its analysis passes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("iterates diverged in round {round} (norm {norm:.3e})")]
    Divergence { round: usize, norm: f64 },

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("clipping threshold is still `auto`; resolve it from a recorded run first")]
    UnresolvedThreshold,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("i/o: {0}")]
    Io(String),

    #[error("trace is missing per-client diagnostics in round {0}")]
    MissingDiagnostics(usize),
}

pub type Result<T> = std::result::Result<T, Error>;
