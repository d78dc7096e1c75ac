//! Closed-form operation counts for attention and scan-based blocks, and a
//! wall-time / peak-memory harness for this crate's own layers.

mod bench;

pub use bench::{
    bench, slope, BenchInstance, BenchLayer, BenchMeta, BenchPoint, BenchRegistry, BenchReport, BenchRow,
};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZigmaError};

/// Default SSM state size.
pub const DEFAULT_STATE: u64 = 16;

/// Sequence length `m`, channel width `d`, state size `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexitySpec {
    pub m: u64,
    pub d: u64,
    pub n: u64,
}

impl ComplexitySpec {
    pub fn new(m: u64, d: u64, n: u64) -> Result<Self> {
        if m == 0 || d == 0 || n == 0 {
            return Err(ZigmaError::Config(format!("complexity spec needs positive m, d, n; got ({m}, {d}, {n})")));
        }
        Ok(ComplexitySpec { m, d, n })
    }
}

fn overflow() -> ZigmaError {
    ZigmaError::Config("operation count exceeds 128 bits".into())
}

fn mul(xs: &[u128]) -> Result<u128> {
    xs.iter().try_fold(1u128, |acc, &x| acc.checked_mul(x)).ok_or_else(overflow)
}

/// `4 M D² + 2 M² D`.
pub fn flops_self_attention(spec: &ComplexitySpec) -> Result<u128> {
    let (m, d) = (spec.m as u128, spec.d as u128);
    mul(&[4, m, d, d])?.checked_add(mul(&[2, m, m, d])?).ok_or_else(overflow)
}

/// One scan direction: `3 M (2D) N + M (2D) N²`.
pub fn flops_zigzag(spec: &ComplexitySpec) -> Result<u128> {
    let (m, d, n) = (spec.m as u128, spec.d as u128, spec.n as u128);
    mul(&[3, m, 2 * d, n])?.checked_add(mul(&[m, 2 * d, n, n])?).ok_or_else(overflow)
}

/// `k` scan directions per block; `k = 1` is the zigzag block.
pub fn flops_mamba(spec: &ComplexitySpec, k: u64) -> Result<u128> {
    if k == 0 {
        return Err(ZigmaError::Config("k must be at least 1".into()));
    }
    flops_zigzag(spec)?.checked_mul(k as u128).ok_or_else(overflow)
}

fn attention_wins(m: u64, d: u64, n: u64) -> Result<bool> {
    let spec = ComplexitySpec::new(m, d, n)?;
    Ok(flops_self_attention(&spec)? > flops_mamba(&spec, 1)?)
}

/// Smallest `M` at which attention costs strictly more than one scan
/// direction. Attention's `M²` term makes the predicate monotone in `M`, so
/// the answer is bracketed by doubling and then bisected.
pub fn crossover_tokens(d: u64, n: u64) -> Result<u64> {
    if attention_wins(1, d, n)? {
        return Ok(1);
    }
    let mut hi = 2u64;
    while !attention_wins(hi, d, n)? {
        hi = hi.checked_mul(2).ok_or_else(overflow)?;
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if attention_wins(mid, d, n)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
