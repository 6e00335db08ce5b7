//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("non-uniform time grid at row {row}: expected t={expected}, found t={found}")]
    Grid { row: usize, expected: f64, found: f64 },

    #[error("invalid data at row {row}: {reason}")]
    Data { row: usize, reason: String },

    #[error("series too short: need at least {needed} rows, have {have}")]
    TooShort { needed: usize, have: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("divergence at t={t}: {reason}")]
    Divergence { t: f64, reason: String },

    #[error("solver did not converge: {reason} (reached t={t_reached})")]
    NonConvergence { t_reached: f64, reason: String },

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("generation failed at sample {step}: {source}")]
    Generation {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("rollout diverged at step {step}")]
    RolloutDiverged { step: usize },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("training aborted at epoch {epoch}: non-finite loss")]
    NonFiniteLoss { epoch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
