//! Selective state-space layers and their scan evaluators.

mod evaluator;
mod gated;
mod mamba;
mod selective;

pub use evaluator::{EvaluatorRegistry, Parallel, ScanInputs, Sequential, SsmEvaluator};
pub use gated::{DiagonalSsm, GatedBlock};
pub use mamba::{MambaConfig, MambaLayer};
pub use selective::{causal_conv, flip_seq, selective_scan};
