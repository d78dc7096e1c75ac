//! Stochastic interpolants between data (t = 0) and Gaussian noise (t = 1):
//! path schedule, velocity/score algebra, training objectives and samplers.

mod analytic;
mod objective;
mod sampler;

pub use analytic::{DiracField, GaussianField};
pub use objective::{
    CfmLoss, Denoiser, Draw, Objective, ObjectiveRegistry, Parameterization, ScoreLoss, TimeReversal, VelocityLoss,
};
pub use sampler::{
    sample, time_grid, EulerMaruyama, HeunOde, EulerOde, ModelField, Sampler, SamplerConfig, SamplerRegistry,
    TrajectoryManifest, TrajectoryRecorder, VelocityField,
};

use diffkit::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZigmaError};

/// Terminal clamp for sampling and score-loss time draws.
pub const EPS_CLIP: f64 = 1e-3;

/// Default `σ_min` of the flow-matching objective.
pub const SIGMA_MIN: f64 = 1e-5;

/// Path family of the interpolant `x_t = α_t x* + σ_t ε`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Path {
    /// `α = 1 − t`, `σ = t`.
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolantSchedule {
    pub path: Path,
    pub sigma_min: f64,
}

impl Default for InterpolantSchedule {
    fn default() -> Self {
        InterpolantSchedule {
            path: Path::Linear,
            sigma_min: SIGMA_MIN,
        }
    }
}

impl InterpolantSchedule {
    pub fn linear() -> Self {
        Self::default()
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(Self::linear()),
            other => Err(ZigmaError::UnknownStrategy {
                kind: "schedule",
                name: other.to_string(),
                known: "linear".into(),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.path {
            Path::Linear => "linear",
        }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.path {
            Path::Linear => 1.0 - t,
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.path {
            Path::Linear => t,
        }
    }

    pub fn dalpha(&self, _t: f64) -> f64 {
        match self.path {
            Path::Linear => -1.0,
        }
    }

    pub fn dsigma(&self, _t: f64) -> f64 {
        match self.path {
            Path::Linear => 1.0,
        }
    }

    /// `α̇σ − ασ̇`, nonzero on (0, 1].
    fn denominator(&self, t: f64) -> f64 {
        self.dalpha(t) * self.sigma(t) - self.alpha(t) * self.dsigma(t)
    }

    /// `α_t x* + σ_t ε`, with one `t` per leading-axis sample.
    pub fn interpolate(&self, x_star: &Tensor, eps: &Tensor, t: &[f64]) -> Result<Tensor> {
        let (a, s) = (self.per_sample(t, |t| self.alpha(t))?, self.per_sample(t, |t| self.sigma(t))?);
        combine(x_star, eps, t.len(), &a, &s)
    }

    /// `α̇_t x* + σ̇_t ε`; equals `ε − x*` on the linear path.
    pub fn velocity_target(&self, x_star: &Tensor, eps: &Tensor, t: &[f64]) -> Result<Tensor> {
        let (a, s) = (self.per_sample(t, |t| self.dalpha(t))?, self.per_sample(t, |t| self.dsigma(t))?);
        combine(x_star, eps, t.len(), &a, &s)
    }

    fn per_sample(&self, t: &[f64], f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
        t.iter()
            .map(|&t| {
                if (0.0..=1.0).contains(&t) {
                    Ok(f(t))
                } else {
                    Err(ZigmaError::TimeOutOfRange { t, range: "[0, 1]" })
                }
            })
            .collect()
    }

    /// Score from velocity: `s = σ⁻¹ (α v − α̇ x) / (α̇σ − ασ̇)`.
    /// On the linear path `s = −((1 − t) v + x) / t`.
    pub fn velocity_to_score(&self, v: &Tensor, x: &Tensor, t: f64) -> Result<Tensor> {
        if !(t > EPS_CLIP && t <= 1.0) {
            return Err(ZigmaError::TimeOutOfRange { t, range: "(eps_clip, 1]" });
        }
        check_same(v, x)?;
        let (a, da, s, den) = (self.alpha(t), self.dalpha(t), self.sigma(t), self.denominator(t));
        Ok(v.zip_map(x, |v, x| (a * v - da * x) / (s * den)))
    }

    /// Inverse of [`velocity_to_score`](Self::velocity_to_score):
    /// `v = (σ s (α̇σ − ασ̇) + α̇ x) / α`, singular where `α = 0`.
    pub fn score_to_velocity(&self, s: &Tensor, x: &Tensor, t: f64) -> Result<Tensor> {
        if !(t > 0.0 && t < 1.0) {
            return Err(ZigmaError::TimeOutOfRange { t, range: "(0, 1)" });
        }
        check_same(s, x)?;
        let (a, da, sig, den) = (self.alpha(t), self.dalpha(t), self.sigma(t), self.denominator(t));
        Ok(s.zip_map(x, |s, x| (sig * s * den + da * x) / a))
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ZigmaError::Config(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `a_b · x + s_b · y` with per-sample coefficients.
fn combine(x: &Tensor, y: &Tensor, batch: usize, a: &[f64], s: &[f64]) -> Result<Tensor> {
    check_same(x, y)?;
    let per = per_sample_len(x, batch)?;
    let mut out = x.clone();
    for (i, (o, e)) in out.data_mut().iter_mut().zip(y.data()).enumerate() {
        let b = i / per;
        *o = a[b] * *o + s[b] * e;
    }
    Ok(out)
}

pub(crate) fn per_sample_len(x: &Tensor, batch: usize) -> Result<usize> {
    if batch == 0 || x.shape().first() != Some(&batch) {
        return Err(ZigmaError::Config(format!(
            "{} time values for tensor of shape {:?}",
            batch,
            x.shape()
        )));
    }
    Ok(x.numel() / batch)
}

/// Tensor shaped like `x` holding `f(t_b)` across each sample's elements.
pub(crate) fn broadcast_per_sample(x_shape: &[usize], t: &[f64], f: impl Fn(f64) -> f64) -> Tensor {
    let per = x_shape.iter().product::<usize>() / t.len().max(1);
    Tensor::from_fn(x_shape, |i| f(t[i / per]))
}
