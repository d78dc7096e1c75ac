//! Zigzag-scan selective state-space backbone for diffusion models, with
//! stochastic-interpolant objectives, ODE/SDE samplers and a complexity model.

pub mod complexity;
pub mod error;
pub mod init;
pub mod interpolant;
pub mod model;
pub mod scan;
pub mod ssm;
pub mod train;

pub use error::{Result, ZigmaError};
