use thiserror::Error;

/// Errors produced anywhere in the offline or online pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integration failed at t = {time}: {reason}")]
    Integration { time: f64, reason: String },

    #[error("nonlinear solve did not converge after {iterations} iterations (update norm {residual:e})")]
    SolverDivergence { iterations: usize, residual: f64 },

    #[error("query {0:?} lies outside the interpolation lattice")]
    Extrapolation(Vec<f64>),

    #[error("regularization search failed, every candidate was unstable: {0}")]
    SearchFailed(String),

    #[error("network cache does not match the current parameters")]
    StaleCache,

    #[error("training aborted at epoch {epoch}: {reason}")]
    TrainingAborted {
        epoch: usize,
        reason: String,
        history: Box<crate::training::TrainingHistory>,
    },

    #[error("ensemble member {member} failed: {source}")]
    EnsembleMember {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown kind `{0}`")]
    UnknownKind(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
