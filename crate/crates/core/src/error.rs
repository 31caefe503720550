use thiserror::Error;

/// Errors produced by the inference library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive definite after jitter ladder {ladder:?}")]
    NotPositiveDefinite { ladder: Vec<f64> },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error("forward solver did not converge after {iterations} iterations (residual trace {trace:?})")]
    NoConvergence { iterations: usize, trace: Vec<f64> },

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("EM failed at cycle {cycle}: {reason} (theta history {theta_history:?})")]
    Em {
        cycle: usize,
        reason: String,
        theta_history: Vec<[f64; 2]>,
        kl_history: Vec<f64>,
    },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::dim(context, expected, got))
    }
}
