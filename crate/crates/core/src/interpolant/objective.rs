//! Regression objectives for velocity, score and flow-matching training.

use std::collections::BTreeMap;
use std::sync::Arc;

use diffkit::{Bound, Tape, Tensor, Var};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{broadcast_per_sample, InterpolantSchedule, EPS_CLIP};
use crate::error::{Result, ZigmaError};
use crate::model::ZigMa;

/// A network mapping `(x, t, labels)` to a tensor shaped like `x`.
pub trait Denoiser {
    fn predict<'t>(&self, p: &Bound<'t>, x: Var<'t>, t: &[f64], labels: Option<&[usize]>) -> Result<Var<'t>>;
}

impl Denoiser for ZigMa {
    fn predict<'t>(&self, p: &Bound<'t>, x: Var<'t>, t: &[f64], labels: Option<&[usize]>) -> Result<Var<'t>> {
        self.forward(p, x, t, labels)
    }
}

/// What the network output estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Velocity,
    Score,
}

/// One draw of data, noise and per-sample times.
#[derive(Debug, Clone)]
pub struct Draw {
    pub x_star: Tensor,
    pub eps: Tensor,
    pub t: Vec<f64>,
}

impl Draw {
    /// Standard-normal noise and `t ~ U(t_lo, 1)` per sample.
    pub fn sample(x_star: Tensor, t_lo: f64, rng: &mut dyn RngCore) -> Draw {
        let eps = Tensor::from_fn(x_star.shape(), |_| rng.sample(StandardNormal));
        let batch = x_star.shape().first().copied().unwrap_or(0);
        let t = (0..batch).map(|_| t_lo + (1.0 - t_lo) * rng.random::<f64>()).collect();
        Draw { x_star, eps, t }
    }
}

pub trait Objective: Send + Sync {
    fn name(&self) -> &'static str;

    /// Lower end of the uniform time draw.
    fn t_min(&self) -> f64 {
        0.0
    }

    /// How a network trained with this objective is read at sampling time.
    fn parameterization(&self) -> Parameterization {
        Parameterization::Velocity
    }

    /// Mean squared error over all elements of the batch.
    fn loss<'t>(
        &self,
        tape: &'t Tape,
        net: &dyn Denoiser,
        p: &Bound<'t>,
        schedule: &InterpolantSchedule,
        draw: &Draw,
        labels: Option<&[usize]>,
    ) -> Result<Var<'t>>;
}

fn finite<'t>(loss: Var<'t>, context: &'static str) -> Result<Var<'t>> {
    if loss.value().item().is_finite() {
        Ok(loss)
    } else {
        Err(ZigmaError::NonFinite { context, position: 0 })
    }
}

/// `‖v_θ(x_t, t) − (α̇ x* + σ̇ ε)‖²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct VelocityLoss;

impl Objective for VelocityLoss {
    fn name(&self) -> &'static str {
        "velocity"
    }

    fn loss<'t>(
        &self,
        tape: &'t Tape,
        net: &dyn Denoiser,
        p: &Bound<'t>,
        schedule: &InterpolantSchedule,
        draw: &Draw,
        labels: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        let xt = schedule.interpolate(&draw.x_star, &draw.eps, &draw.t)?;
        let target = schedule.velocity_target(&draw.x_star, &draw.eps, &draw.t)?;
        let pred = net.predict(p, tape.constant(xt), &draw.t, labels)?;
        finite(pred.mse(tape.constant(target))?, "velocity loss")
    }
}

/// `‖σ_t s_θ(x_t, t) + ε‖²` with `t` drawn from `[EPS_CLIP, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreLoss;

impl Objective for ScoreLoss {
    fn name(&self) -> &'static str {
        "score"
    }

    fn t_min(&self) -> f64 {
        EPS_CLIP
    }

    fn parameterization(&self) -> Parameterization {
        Parameterization::Score
    }

    fn loss<'t>(
        &self,
        tape: &'t Tape,
        net: &dyn Denoiser,
        p: &Bound<'t>,
        schedule: &InterpolantSchedule,
        draw: &Draw,
        labels: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        if let Some(&t) = draw.t.iter().find(|&&t| t < EPS_CLIP) {
            return Err(ZigmaError::TimeOutOfRange { t, range: "[eps_clip, 1]" });
        }
        let xt = schedule.interpolate(&draw.x_star, &draw.eps, &draw.t)?;
        let pred = net.predict(p, tape.constant(xt), &draw.t, labels)?;
        let sigma = broadcast_per_sample(draw.x_star.shape(), &draw.t, |t| schedule.sigma(t));
        let scaled = pred.mul(tape.constant(sigma))?;
        finite(scaled.mse(tape.constant(draw.eps.map(|e| -e)))?, "score loss")
    }
}

/// Conversion between the interpolant clock (data at 0, noise at 1) and the
/// flow-matching clock (noise at 0, data at 1).
#[derive(Debug, Clone, Copy, Default)]
pub struct TimeReversal;

impl TimeReversal {
    pub fn to_flow_time(tau: f64) -> f64 {
        1.0 - tau
    }

    pub fn to_interpolant_time(s: f64) -> f64 {
        1.0 - s
    }

    /// A field on one clock read on the other changes sign.
    pub fn flip_velocity<'t>(v: Var<'t>) -> Var<'t> {
        v.neg()
    }
}

/// Optimal-transport flow matching,
/// `‖u_θ(ψ_s(x₀), s) − (x₁ − (1 − σ_min) x₀)‖²` with
/// `ψ_s(x₀) = (1 − (1 − σ_min) s) x₀ + s x₁`, noise `x₀` and data `x₁`.
///
/// The network keeps the interpolant convention: `u_θ(x, s) = −v_θ(x, 1 − s)`,
/// so a network trained here samples like one trained with [`VelocityLoss`].
/// The draw's times are interpolant times `τ`, mapped to `s = 1 − τ`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CfmLoss;

impl CfmLoss {
    /// `ψ_s(x₀)` for noise `x0`, data `x1` and flow times `s`.
    pub fn psi(x0: &Tensor, x1: &Tensor, s: &[f64], sigma_min: f64) -> Result<Tensor> {
        let per = super::per_sample_len(x0, s.len())?;
        if x0.shape() != x1.shape() {
            return Err(ZigmaError::Config(format!("shape mismatch {:?} vs {:?}", x0.shape(), x1.shape())));
        }
        let mut out = x0.clone();
        for (i, (o, d)) in out.data_mut().iter_mut().zip(x1.data()).enumerate() {
            let s = s[i / per];
            *o = (1.0 - (1.0 - sigma_min) * s) * *o + s * d;
        }
        Ok(out)
    }

    /// `x₁ − (1 − σ_min) x₀`.
    pub fn target(x0: &Tensor, x1: &Tensor, sigma_min: f64) -> Tensor {
        x1.zip_map(x0, |d, n| d - (1.0 - sigma_min) * n)
    }
}

impl Objective for CfmLoss {
    fn name(&self) -> &'static str {
        "cfm"
    }

    fn loss<'t>(
        &self,
        tape: &'t Tape,
        net: &dyn Denoiser,
        p: &Bound<'t>,
        schedule: &InterpolantSchedule,
        draw: &Draw,
        labels: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        let s: Vec<f64> = draw.t.iter().map(|&tau| TimeReversal::to_flow_time(tau)).collect();
        let psi = Self::psi(&draw.eps, &draw.x_star, &s, schedule.sigma_min)?;
        let target = Self::target(&draw.eps, &draw.x_star, schedule.sigma_min);
        let tau: Vec<f64> = s.iter().map(|&s| TimeReversal::to_interpolant_time(s)).collect();
        let u = TimeReversal::flip_velocity(net.predict(p, tape.constant(psi), &tau, labels)?);
        finite(u.mse(tape.constant(target))?, "flow matching loss")
    }
}

#[derive(Clone)]
pub struct ObjectiveRegistry {
    entries: BTreeMap<&'static str, Arc<dyn Objective>>,
}

impl ObjectiveRegistry {
    pub fn builtin() -> Self {
        let mut r = ObjectiveRegistry { entries: BTreeMap::new() };
        r.register(Arc::new(VelocityLoss));
        r.register(Arc::new(ScoreLoss));
        r.register(Arc::new(CfmLoss));
        r
    }

    pub fn register(&mut self, o: Arc<dyn Objective>) {
        self.entries.insert(o.name(), o);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Objective>> {
        self.entries.get(name).cloned().ok_or_else(|| ZigmaError::UnknownStrategy {
            kind: "objective",
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }
}
