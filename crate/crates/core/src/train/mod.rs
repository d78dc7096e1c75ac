//! Training on synthetic datasets, checkpoints and sample generation.

pub mod checkpoint;
mod config;
mod data;
mod sample;
mod trainer;

pub use config::{OptimizerConfig, RunConfig};
pub use data::{Batch, Distribution, SyntheticSpec};
pub use sample::{encode_pgm, generate, write_samples};
pub use trainer::{data_batch, thread_budget, StepMetrics, Trainer, NAN_ABORT_STREAK};
