use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The records reaching the aggregation (or a value-typed operator) are
    /// not `(key, value)` pairs.
    #[error("stage `{stage}`: {detail}")]
    StageType { stage: String, detail: String },

    /// A transform reported an output grouping that does not match the
    /// operator's arity.
    #[error("stage `{stage}`: inconsistent output grouping: {detail}")]
    InconsistentGrouping { stage: String, detail: String },

    #[error("pilot phase failed: {0}")]
    Pilot(String),

    /// Rate search cannot satisfy the error-bound targets.
    #[error(
        "error-bound targets infeasible: percentile {percentile} predicts {predicted} > target {target}"
    )]
    InfeasibleTargets {
        percentile: f64,
        predicted: f64,
        target: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
