//! Multi-head softmax attention as one fused op.
//!
//! Scores are streamed one query row at a time; only the per-row
//! log-sum-exp is kept, and the backward pass recomputes the
//! probabilities from it. Memory is `O(M·d)` rather than `O(M·K)`.

use diffkit::{Bound, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{Result, ZigmaError};
use crate::init;

struct Dims {
    batch: usize,
    m: usize,
    k: usize,
    d: usize,
    heads: usize,
    dh: usize,
}

fn check(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Dims> {
    let (&[batch, m, d], &[kb, kn, kd], vs) = (q.shape(), k.shape(), v.shape()) else {
        return Err(ZigmaError::Config(format!("attention expects rank-3 q/k, got {:?} {:?}", q.shape(), k.shape())));
    };
    if kb != batch || kd != d || vs != k.shape() {
        return Err(ZigmaError::Config(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            vs
        )));
    }
    if kn == 0 {
        return Err(ZigmaError::Config("attention over an empty key set".into()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(ZigmaError::Config(format!("{heads} heads do not divide width {d}")));
    }
    Ok(Dims {
        batch,
        m,
        k: kn,
        d,
        heads,
        dh: d / heads,
    })
}

/// Scores of one query row against every key of one head, into `s`.
fn scores(q: &[f64], k: &[f64], dm: &Dims, b: usize, i: usize, h: usize, s: &mut [f64]) {
    let scale = 1.0 / (dm.dh as f64).sqrt();
    let qr = &q[(b * dm.m + i) * dm.d + h * dm.dh..][..dm.dh];
    for (j, sj) in s.iter_mut().enumerate() {
        let kr = &k[(b * dm.k + j) * dm.d + h * dm.dh..][..dm.dh];
        *sj = qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale;
    }
}

/// Softmax attention weights `[B, heads, M, K]`, for inspection only.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    let dm = check(q, k, k, heads)?;
    let mut out = vec![0.0; dm.batch * heads * dm.m * dm.k];
    let mut s = vec![0.0; dm.k];
    for b in 0..dm.batch {
        for h in 0..heads {
            for i in 0..dm.m {
                scores(q.data(), k.data(), &dm, b, i, h, &mut s);
                let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
                let row = &mut out[((b * heads + h) * dm.m + i) * dm.k..][..dm.k];
                for (o, x) in row.iter_mut().zip(&s) {
                    *o = (x - mx).exp() / z;
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[dm.batch, heads, dm.m, dm.k], out)?)
}

/// `softmax(q kᵀ / sqrt(d/heads)) v` per head; `q: [B, M, d]`, `k, v: [B, K, d]`.
pub fn attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let dm = check(&qv, &kv, &vv, heads)?;
    let mut out = vec![0.0; dm.batch * dm.m * dm.d];
    let mut lse = vec![0.0; dm.batch * heads * dm.m];
    let mut s = vec![0.0; dm.k];
    for b in 0..dm.batch {
        for h in 0..heads {
            for i in 0..dm.m {
                scores(qv.data(), kv.data(), &dm, b, i, h, &mut s);
                let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
                lse[(b * heads + h) * dm.m + i] = mx + z.ln();
                let orow = &mut out[(b * dm.m + i) * dm.d + h * dm.dh..][..dm.dh];
                for (j, sj) in s.iter().enumerate() {
                    let p = (sj - mx).exp() / z;
                    let vr = &vv.data()[(b * dm.k + j) * dm.d + h * dm.dh..][..dm.dh];
                    for (o, x) in orow.iter_mut().zip(vr) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    let value = Tensor::from_vec(qv.shape(), out)?;
    let scale = 1.0 / (dm.dh as f64).sqrt();
    Ok(q.tape().custom(&[q, k, v], value, move |g, _| {
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut s = vec![0.0; dm.k];
        let mut dp = vec![0.0; dm.k];
        for b in 0..dm.batch {
            for h in 0..dm.heads {
                for i in 0..dm.m {
                    scores(qd, kd, &dm, b, i, h, &mut s);
                    let l = lse[(b * dm.heads + h) * dm.m + i];
                    let go = &gd[(b * dm.m + i) * dm.d + h * dm.dh..][..dm.dh];
                    let mut dot = 0.0;
                    for (j, sj) in s.iter_mut().enumerate() {
                        *sj = (*sj - l).exp();
                        let off = (b * dm.k + j) * dm.d + h * dm.dh;
                        dp[j] = go.iter().zip(&vd[off..off + dm.dh]).map(|(a, b)| a * b).sum();
                        dot += *sj * dp[j];
                        for (gvx, gox) in gv[off..off + dm.dh].iter_mut().zip(go) {
                            *gvx += *sj * gox;
                        }
                    }
                    let qoff = (b * dm.m + i) * dm.d + h * dm.dh;
                    for j in 0..dm.k {
                        let ds = s[j] * (dp[j] - dot) * scale;
                        let koff = (b * dm.k + j) * dm.d + h * dm.dh;
                        for c in 0..dm.dh {
                            gq[qoff + c] += ds * kd[koff + c];
                            gk[koff + c] += ds * qd[qoff + c];
                        }
                    }
                }
            }
        }
        vec![
            Some(Tensor::from_vec(qv.shape(), gq).expect("shape")),
            Some(Tensor::from_vec(kv.shape(), gk).expect("shape")),
            Some(Tensor::from_vec(vv.shape(), gv).expect("shape")),
        ]
    }))
}

/// Attention with query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl AttentionLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(ZigmaError::Config(format!("{heads} heads do not divide width {d}")));
        }
        let mut lin = |name: &str| store.add(format!("{prefix}.{name}"), init::linear(rng, d, d));
        Ok(AttentionLayer {
            heads,
            w_q: lin("W_q"),
            w_k: lin("W_k"),
            w_v: lin("W_v"),
            w_o: lin("W_o"),
        })
    }

    pub fn param_count(d: usize) -> usize {
        4 * d * d
    }

    /// Queries from `x: [B, M, d]`, keys and values from `c: [B, K, d]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, c: Var<'t>) -> Result<Var<'t>> {
        let q = x.linear(p.var(self.w_q), None)?;
        let k = c.linear(p.var(self.w_k), None)?;
        let v = c.linear(p.var(self.w_v), None)?;
        Ok(attention(q, k, v, self.heads)?.linear(p.var(self.w_o), None)?)
    }
}
