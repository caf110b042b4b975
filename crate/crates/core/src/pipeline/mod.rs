//! Data ingestion, checkpoints, run configuration and the subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod logging;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind};
pub use config::{EvalConfig, RunConfig};
pub use data::{preprocess, synthetic_dataset, BatchLoader, Dataset, DatasetKind, DatasetSpec, Split};
