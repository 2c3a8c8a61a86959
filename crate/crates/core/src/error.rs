use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("capacity exceeded: {what} needs {needed} entries, cap is {cap}")]
    Capacity {
        what: &'static str,
        needed: u128,
        cap: u128,
    },

    #[error("no convergence after {sweeps} sweeps (last sup-norm update {last_update:.3e})")]
    IterationLimit { sweeps: usize, last_update: f64 },

    #[error("root not bracketed at state {state}: {detail}")]
    Bracket { state: usize, detail: String },

    #[error("unsupported check: {0}")]
    Unsupported(String),

    #[error("stuck at state {state}: total jump rate is zero outside the target set (reward there is {reward})")]
    StuckState { state: usize, reward: f64 },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("integration step too coarse: coordinate {coord} reached {value:.3e}")]
    StepSize { coord: usize, value: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
