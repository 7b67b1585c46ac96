use thiserror::Error;

/// Errors produced by the solver, the forward engine and the oracles.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid game spec: {0}")]
    InvalidSpec(String),

    #[error("invalid belief: {0}")]
    InvalidBelief(String),

    #[error("invalid prescription: {0}")]
    InvalidPrescription(String),

    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    #[error("signal {signal} has zero probability under the current belief and prescription")]
    ZeroProbabilitySignal { signal: usize },

    #[error("rewards {rewards:?} under joint action {action} are inconsistent with every state in the belief support")]
    InconsistentReward { action: usize, rewards: Vec<f64> },

    #[error("no stage fixed point found: {0}")]
    NoFixedPointFound(String),

    #[error("stage failure at t={t}, grid point {point}: {reason}")]
    StageFailure {
        t: usize,
        point: usize,
        reason: String,
    },

    #[error("no solved prescription for belief {belief:?} at t={t} (history: {history})")]
    UnsolvedBelief {
        t: usize,
        belief: Vec<f64>,
        history: String,
    },

    #[error("tree too large: {nodes} nodes exceeds the cap of {cap}")]
    TreeTooLarge { nodes: u64, cap: u64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
