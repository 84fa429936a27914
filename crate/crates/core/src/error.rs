//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("invalid dataset: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("design matrix is rank deficient (pivot {pivot} of {cols} columns is negligible)")]
    RankDeficient { pivot: usize, cols: usize },

    #[error("perfect separation detected while fitting logistic model: {0}")]
    PerfectSeparation(String),

    #[error("IRLS did not converge after {iterations} iterations (last change {last_change:e})")]
    NotConverged { iterations: usize, last_change: f64 },

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("no clusters with s=1 and treatment {arm} — the arm mean is undefined")]
    EmptyArm { arm: String },

    #[error("no clusters with s=0 — estimands for the non-randomized subset are undefined")]
    NoNonRandomizedClusters,

    #[error(
        "positivity violation: cluster {cluster_id} has {kind} probability {value} \
         but its indicator is 1"
    )]
    PositivityViolation {
        cluster_id: String,
        kind: &'static str,
        value: f64,
    },

    #[error("simulation failed: {0}")]
    Simulation(String),
}
