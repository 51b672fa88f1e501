use thiserror::Error;

use crate::mdp::{AssumptionViolation, Violation};

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {}", join(.0))]
    InvalidModel(Vec<Violation>),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("degenerate chain: {0}")]
    DegenerateChain(String),

    #[error("chain is not ergodic")]
    NotErgodic,

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("assumption violated: {0}")]
    AssumptionViolated(AssumptionViolation),

    #[error("feature matrix is rank deficient (rank {rank} < {columns} columns)")]
    RankDeficientFeatures { rank: usize, columns: usize },

    #[error("target policy takes action {action} in state {state}, which the behavior policy never takes")]
    CoverageViolation { state: usize, action: usize },

    #[error("distribution support exceeded {cap} atoms")]
    SupportExplosion { cap: usize },

    #[error("no convergence after {iterations} iterations (last change {last_change:e})")]
    NotConverged { iterations: usize, last_change: f64 },

    #[error("incomplete step-size grid: no curve for lambda={lambda}, alpha={alpha}")]
    IncompleteGrid { lambda: f64, alpha: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

fn join(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
