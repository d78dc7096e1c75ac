//! Dense `f64` tensors with tape-based reverse-mode differentiation,
//! AdamW/EMA optimisation and a portable tensor dump format.

pub mod dump;
mod error;
pub mod gradcheck;
mod linalg;
pub mod memory;
mod ops;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use linalg::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
pub use ops::{gelu, sigmoid, silu, softplus, Unary, GELU_CUBIC, GELU_SQRT_2_OVER_PI};
pub use optim::{AdamW, AdamWConfig, Ema, StepOutcome};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
