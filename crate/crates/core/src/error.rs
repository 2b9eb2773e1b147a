use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a type invariant (symbol range, shapes, parameters).
    #[error("validation error: {0}")]
    Validation(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("time {t} outside the valid domain {domain}")]
    Domain { t: f64, domain: &'static str },

    /// Rates of the masking flow diverge as 1/(1 - t).
    #[error("rate singularity at t = {0}")]
    Singularity(f64),

    /// No clean state in the data support can produce the noised state.
    #[error("zero evidence for state {0:?}")]
    Evidence(Vec<usize>),

    #[error("enumeration of {required} states exceeds the cap of {cap}; raise the cap to at least {required}")]
    EnumerationCap { required: u128, cap: u128 },

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("operation not supported: {0}")]
    Unsupported(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
