use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    Convergence { iterations: usize, grad_norm: f64 },

    #[error("all importance weights are zero after clipping")]
    DegenerateWeights,

    #[error("estimator is unidentified: {0}")]
    Unidentified(String),

    #[error("degenerate missingness mechanism: P(M=1) = {p_m}")]
    DegenerateMechanism { p_m: f64 },

    #[error("no link parameters in the search box reproduce the targets: {0}")]
    InfeasibleTargets(String),

    #[error("bootstrap degenerate: {failures} of {replicates} replicates failed")]
    BootstrapDegenerate { failures: usize, replicates: usize },

    #[error("parse error on line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("validation error on row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("pipeline step `{step}` failed: {message}")]
    Pipeline { step: &'static str, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Wraps an error with the name of the pipeline step that produced it.
    pub(crate) fn at_step(self, step: &'static str) -> Error {
        match self {
            Error::Pipeline { .. } => self,
            other => Error::Pipeline { step, message: other.to_string() },
        }
    }
}
