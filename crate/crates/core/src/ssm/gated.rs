//! Gated bidirectional SSM block.
//!
//! ```text
//! X = LN(x);  V = σ(W_v X);  F = σ(W_f X);  B = σ(W_b Flip X)
//! U1 = W_u1 SSM_f(F);  U2 = W_u2 SSM_b(B);  U = σ(W_u (U1 ⊙ Flip U2))
//! out = W_o (U ⊙ V) + x
//! ```
//!
//! with σ = GELU. Each SSM is a time-invariant diagonal model with its own
//! parameters.

use diffkit::{Bound, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use super::evaluator::SsmEvaluator;
use super::selective::{flip_seq, selective_scan};
use crate::error::{Result, ZigmaError};
use crate::init;

/// Parameters of one time-invariant diagonal SSM over `d` channels.
#[derive(Debug, Clone, Copy)]
pub struct DiagonalSsm {
    pub a_log: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub log_dt: ParamId,
    pub d_skip: ParamId,
}

impl DiagonalSsm {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, n: usize, rng: &mut R) -> Self {
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t);
        DiagonalSsm {
            a_log: add("A_log", Tensor::from_fn(&[d, n], |i| ((i % n + 1) as f64).ln())),
            b: add("B", init::normal(rng, &[n], 1.0 / (n as f64).sqrt())),
            c: add("C", init::normal(rng, &[n], 1.0 / (n as f64).sqrt())),
            log_dt: add(
                "log_dt",
                Tensor::from_fn(&[d], |_| rng.random_range(0.001f64.ln()..0.1f64.ln())),
            ),
            d_skip: add("D", Tensor::ones(&[d])),
        }
    }

    pub fn param_count(d: usize, n: usize) -> usize {
        d * n + 2 * n + 2 * d
    }

    /// `u: [B, L, d]`; the constant B, C and Δ are broadcast across tokens.
    pub fn forward<'t>(&self, p: &Bound<'t>, eval: &dyn SsmEvaluator, u: Var<'t>) -> Result<Var<'t>> {
        let shape = u.shape();
        let [b, l, d] = shape[..] else {
            return Err(ZigmaError::Config(format!("diagonal ssm expects [B, L, d], got {shape:?}")));
        };
        let n = p.var(self.b).shape()[0];
        let rows = b * l;
        let delta = p.var(self.log_dt).exp().reshape(&[1, d])?.repeat_rows(rows)?.reshape(&[b, l, d])?;
        let bm = p.var(self.b).reshape(&[1, n])?.repeat_rows(rows)?.reshape(&[b, l, n])?;
        let cm = p.var(self.c).reshape(&[1, n])?.repeat_rows(rows)?.reshape(&[b, l, n])?;
        let a = p.var(self.a_log).exp().neg();
        selective_scan(eval, u, delta, a, bm, cm, p.var(self.d_skip))
    }
}

#[derive(Debug, Clone)]
pub struct GatedBlock {
    pub d: usize,
    pub state: usize,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub w_v: ParamId,
    pub w_f: ParamId,
    pub w_b: ParamId,
    pub w_u1: ParamId,
    pub w_u2: ParamId,
    pub w_u: ParamId,
    pub w_o: ParamId,
    pub ssm_f: DiagonalSsm,
    pub ssm_b: DiagonalSsm,
}

impl GatedBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, state: usize, rng: &mut R) -> Result<Self> {
        if d == 0 || state == 0 {
            return Err(ZigmaError::Config("gated block needs d, state >= 1".into()));
        }
        let ln_gamma = store.add(format!("{prefix}.ln.gamma"), Tensor::ones(&[d]));
        let ln_beta = store.add(format!("{prefix}.ln.beta"), Tensor::zeros(&[d]));
        let mut lin = |name: &str, i: usize, o: usize| store.add(format!("{prefix}.{name}"), init::linear(rng, i, o));
        let w_v = lin("W_v", d, 3 * d);
        let w_f = lin("W_f", d, d);
        let w_b = lin("W_b", d, d);
        let w_u1 = lin("W_u1", d, d);
        let w_u2 = lin("W_u2", d, d);
        let w_u = lin("W_u", d, 3 * d);
        let w_o = lin("W_o", 3 * d, d);
        let ssm_f = DiagonalSsm::new(store, &format!("{prefix}.ssm_f"), d, state, rng);
        let ssm_b = DiagonalSsm::new(store, &format!("{prefix}.ssm_b"), d, state, rng);
        Ok(GatedBlock {
            d,
            state,
            ln_gamma,
            ln_beta,
            w_v,
            w_f,
            w_b,
            w_u1,
            w_u2,
            w_u,
            w_o,
            ssm_f,
            ssm_b,
        })
    }

    /// The 13 d² projection weights.
    pub fn projection_count(d: usize) -> usize {
        13 * d * d
    }

    pub fn param_count(d: usize, state: usize) -> usize {
        Self::projection_count(d) + 2 * d + 2 * DiagonalSsm::param_count(d, state)
    }

    /// The same block with the forward and backward branches exchanged.
    pub fn swapped(&self) -> GatedBlock {
        GatedBlock {
            w_f: self.w_b,
            w_b: self.w_f,
            w_u1: self.w_u2,
            w_u2: self.w_u1,
            ssm_f: self.ssm_b,
            ssm_b: self.ssm_f,
            ..self.clone()
        }
    }

    /// `x: [B, L, d]` or `[L, d]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, eval: &dyn SsmEvaluator, x: Var<'t>) -> Result<Var<'t>> {
        let orig = x.shape();
        let x3 = match orig[..] {
            [l, d] if d == self.d => x.reshape(&[1, l, d])?,
            [_, _, d] if d == self.d => x,
            _ => return Err(ZigmaError::Config(format!("gated block expects [.., L, {}], got {orig:?}", self.d))),
        };
        let xn = x3.layer_norm(Some(p.var(self.ln_gamma)), Some(p.var(self.ln_beta)), 1e-5)?;
        let v = xn.linear(p.var(self.w_v), None)?.gelu();
        let f = xn.linear(p.var(self.w_f), None)?.gelu();
        let bwd = flip_seq(xn)?.linear(p.var(self.w_b), None)?.gelu();
        let u1 = self.ssm_f.forward(p, eval, f)?.linear(p.var(self.w_u1), None)?;
        let u2 = self.ssm_b.forward(p, eval, bwd)?.linear(p.var(self.w_u2), None)?;
        let u = u1.mul(flip_seq(u2)?)?.linear(p.var(self.w_u), None)?.gelu();
        let o = u.mul(v)?.linear(p.var(self.w_o), None)?;
        Ok(o.add(x3)?.reshape(&orig)?)
    }
}
