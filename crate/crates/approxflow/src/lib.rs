//! Approximate-aggregation dataflow engine.
//!
//! The engine samples data at arbitrary points in a chain of transformations
//! (partition and item sampling at load, explicit sample ops inside the
//! chain), tracks the induced multi-level clustering in a data provenance
//! tree, and computes per-key aggregate estimates with statistically derived
//! error bounds. Stratified reservoir sampling preserves rare keys, and a
//! pilot-based tuner selects sampling rates that meet user targets on the
//! error-bound CDF.

pub mod asrs;
pub mod dataset;
mod error;
pub mod estimator;
pub mod pipeline;
pub mod provenance;
pub mod rng;
pub mod tuner;

pub use dataset::{load_text, PartitionedDataset, Record, SamplingConfig, Value};
pub use error::{Error, Result};
pub use estimator::{ConfidenceSpec, KeyEstimate};
pub use pipeline::{
    builtin_pipeline, execute, execute_exact, AggregationResult, FinalStage, RunMetadata,
    TransformChain, TransformOp,
};
