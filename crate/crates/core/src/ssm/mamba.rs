//! Mamba-style selective SSM layer.

use std::sync::Arc;

use diffkit::{Bound, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::evaluator::{Sequential, SsmEvaluator};
use super::selective::{causal_conv, selective_scan};
use crate::error::{Result, ZigmaError};
use crate::init;

/// Shape hyperparameters of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MambaConfig {
    pub d_model: usize,
    #[serde(default = "default_state")]
    pub d_state: usize,
    #[serde(default = "default_expand")]
    pub expand: usize,
    #[serde(default = "default_conv")]
    pub conv_width: usize,
}

fn default_state() -> usize {
    16
}
fn default_expand() -> usize {
    2
}
fn default_conv() -> usize {
    4
}

impl MambaConfig {
    pub fn new(d_model: usize) -> Self {
        MambaConfig {
            d_model,
            d_state: default_state(),
            expand: default_expand(),
            conv_width: default_conv(),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Rank of the low-rank Δ projection.
    pub fn dt_rank(&self) -> usize {
        (self.d_model / 16).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_state == 0 || self.expand == 0 || self.conv_width == 0 {
            return Err(ZigmaError::Config(format!("mamba dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Parameter count of one layer, from the shapes allocated in [`MambaLayer::new`].
    pub fn param_count(&self) -> usize {
        let (d, di, n, r, k) = (self.d_model, self.d_inner(), self.d_state, self.dt_rank(), self.conv_width);
        d * 2 * di // in_proj
            + di * k + di // conv
            + di * (r + 2 * n) // x_proj
            + r * di + di // dt_proj
            + di * n // A_log
            + di // D
            + di * d // out_proj
    }
}

/// Handles into a [`ParamStore`] for one layer.
#[derive(Clone)]
pub struct MambaLayer {
    pub cfg: MambaConfig,
    pub in_proj: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub x_proj: ParamId,
    pub dt_proj: ParamId,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: ParamId,
    evaluator: Arc<dyn SsmEvaluator>,
}

impl MambaLayer {
    /// Registers parameters named `{prefix}.*`. `A_log` rows start at
    /// `log(1..=N)`; the Δ bias is the inverse softplus of a log-uniform
    /// draw in `[1e-3, 1e-1]`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: MambaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, di, n, r, k) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.dt_rank(), cfg.conv_width);
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t);
        let in_proj = add("in_proj", init::linear(rng, d, 2 * di));
        let conv_w = add("conv_w", init::uniform(rng, &[di, k], 1.0 / (k as f64).sqrt()));
        let conv_b = add("conv_b", init::uniform(rng, &[di], 1.0 / (k as f64).sqrt()));
        let x_proj = add("x_proj", init::linear(rng, di, r + 2 * n));
        let dt_proj = add("dt_proj", init::uniform(rng, &[r, di], 1.0 / (r as f64).sqrt()));
        let dt_bias = add(
            "dt_bias",
            Tensor::from_fn(&[di], |_| {
                let dt = (rng.random_range(0.0..1.0) * (0.1f64.ln() - 0.001f64.ln()) + 0.001f64.ln()).exp();
                dt + (-(-dt).exp_m1()).ln()
            }),
        );
        let a_log = add("A_log", Tensor::from_fn(&[di, n], |i| ((i % n + 1) as f64).ln()));
        let d_skip = add("D", Tensor::ones(&[di]));
        let out_proj = add("out_proj", init::linear(rng, di, d));
        Ok(MambaLayer {
            cfg,
            in_proj,
            conv_w,
            conv_b,
            x_proj,
            dt_proj,
            dt_bias,
            a_log,
            d_skip,
            out_proj,
            evaluator: Arc::new(Sequential),
        })
    }

    pub fn with_evaluator(mut self, evaluator: Arc<dyn SsmEvaluator>) -> Self {
        self.evaluator = evaluator;
        self
    }

    pub fn evaluator(&self) -> &dyn SsmEvaluator {
        self.evaluator.as_ref()
    }

    /// `x: [B, L, D] -> [B, L, D]`. The residual connection is left to the caller.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (b, l) = match *shape {
            [b, l, d] if d == self.cfg.d_model => (b, l),
            _ => {
                return Err(ZigmaError::Config(format!(
                    "mamba layer expects [B, L, {}], got {shape:?}",
                    self.cfg.d_model
                )))
            }
        };
        let (di, n, r) = (self.cfg.d_inner(), self.cfg.d_state, self.cfg.dt_rank());
        let xz = x.linear(p.var(self.in_proj), None)?;
        let xs = xz.slice_last(0, di)?;
        let z = xz.slice_last(di, 2 * di)?;
        let xs = causal_conv(xs, p.var(self.conv_w), p.var(self.conv_b))?.silu();
        let dbc = xs.linear(p.var(self.x_proj), None)?;
        let dt_low = dbc.slice_last(0, r)?;
        let bm = dbc.slice_last(r, r + n)?;
        let cm = dbc.slice_last(r + n, r + 2 * n)?;
        let delta = dt_low.linear(p.var(self.dt_proj), Some(p.var(self.dt_bias)))?.softplus();
        let a = p.var(self.a_log).exp().neg();
        let y = selective_scan(self.evaluator.as_ref(), xs, delta, a, bm, cm, p.var(self.d_skip))?;
        let y = y.mul(z.silu())?;
        debug_assert_eq!(y.shape(), [b, l, di]);
        Ok(y.linear(p.var(self.out_proj), None)?)
    }
}
