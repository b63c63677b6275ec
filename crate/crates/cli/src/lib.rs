//! Config-driven experiment pipeline for the `opinf` binary: full-order
//! simulation, POD reduction, training of every requested model family,
//! reduced rollouts and CSV/JSON export.

pub mod catalog;
pub mod config;
pub mod family;
pub mod pipeline;
pub mod pool;

pub use catalog::{list_experiments, ExperimentId};
pub use config::{ConfigError, ExperimentConfig};
pub use family::Family;
pub use pipeline::{Outcome, Pipeline, PipelineOptions, ResultRow, RunStatus, Split, StageError};
