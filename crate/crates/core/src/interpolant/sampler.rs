//! Integrators from noise at `t = 1` back to data near `t = 0`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use diffkit::dump::{self, DType};
use diffkit::{ParamStore, Tape, Tensor};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::objective::{Denoiser, Parameterization};
use super::{InterpolantSchedule, EPS_CLIP};
use crate::error::{Result, ZigmaError};

/// A drift `v(x, t)` in the interpolant convention.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: String,
    pub steps: usize,
    /// Integration stops here instead of at the singular `t = 0`.
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    /// Diffusion coefficient `w_t = diffusion_scale · σ_t` for the SDE.
    #[serde(default = "default_scale")]
    pub diffusion_scale: f64,
}

fn default_t_end() -> f64 {
    EPS_CLIP
}

fn default_scale() -> f64 {
    1.0
}

impl SamplerConfig {
    pub fn new(kind: &str, steps: usize) -> Self {
        SamplerConfig {
            kind: kind.to_string(),
            steps,
            t_end: EPS_CLIP,
            diffusion_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(ZigmaError::Config("sampler steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.t_end) {
            return Err(ZigmaError::Config(format!("t_end {} outside [0, 1)", self.t_end)));
        }
        if !(self.diffusion_scale >= 0.0 && self.diffusion_scale.is_finite()) {
            return Err(ZigmaError::Config("diffusion_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `steps + 1` uniformly spaced times from 1 down to `t_end`.
pub fn time_grid(steps: usize, t_end: f64) -> Vec<f64> {
    let h = (1.0 - t_end) / steps as f64;
    (0..=steps).map(|k| if k == steps { t_end } else { 1.0 - k as f64 * h }).collect()
}

pub trait Sampler: Send + Sync {
    fn name(&self) -> &'static str;

    /// Advances `x` from `t0` to `t1 < t0`.
    fn step(
        &self,
        field: &dyn VelocityField,
        schedule: &InterpolantSchedule,
        cfg: &SamplerConfig,
        x: &Tensor,
        t0: f64,
        t1: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor>;
}

fn axpy(x: &Tensor, a: f64, v: &Tensor) -> Tensor {
    x.zip_map(v, |x, v| x + a * v)
}

/// Probability-flow ODE, explicit Euler.
#[derive(Debug, Clone, Copy, Default)]
pub struct EulerOde;

impl Sampler for EulerOde {
    fn name(&self) -> &'static str {
        "ode_euler"
    }

    fn step(
        &self,
        field: &dyn VelocityField,
        _: &InterpolantSchedule,
        _: &SamplerConfig,
        x: &Tensor,
        t0: f64,
        t1: f64,
        _: &mut dyn RngCore,
    ) -> Result<Tensor> {
        Ok(axpy(x, t1 - t0, &field.velocity(x, t0)?))
    }
}

/// Probability-flow ODE, Heun's trapezoidal predictor-corrector. The
/// corrector is skipped on a step that ends at `t = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeunOde;

impl Sampler for HeunOde {
    fn name(&self) -> &'static str {
        "ode_heun"
    }

    fn step(
        &self,
        field: &dyn VelocityField,
        _: &InterpolantSchedule,
        _: &SamplerConfig,
        x: &Tensor,
        t0: f64,
        t1: f64,
        _: &mut dyn RngCore,
    ) -> Result<Tensor> {
        let dt = t1 - t0;
        let v0 = field.velocity(x, t0)?;
        let pred = axpy(x, dt, &v0);
        if t1 <= 0.0 {
            return Ok(pred);
        }
        let v1 = field.velocity(&pred, t1)?;
        Ok(x.zip_map(&v0.zip_map(&v1, |a, b| 0.5 * (a + b)), |x, v| x + dt * v))
    }
}

/// Reverse-time SDE, Euler–Maruyama:
/// `X ← X + (v − ½ w s) dt + √(w |dt|) ξ` with `dt < 0` and the score `s`
/// recovered from `v`.
#[derive(Debug, Clone, Copy, Default)]
pub struct EulerMaruyama;

impl Sampler for EulerMaruyama {
    fn name(&self) -> &'static str {
        "sde_euler_maruyama"
    }

    fn step(
        &self,
        field: &dyn VelocityField,
        schedule: &InterpolantSchedule,
        cfg: &SamplerConfig,
        x: &Tensor,
        t0: f64,
        t1: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor> {
        let dt = t1 - t0;
        let v = field.velocity(x, t0)?;
        let s = schedule.velocity_to_score(&v, x, t0)?;
        let w = cfg.diffusion_scale * schedule.sigma(t0);
        let amp = (w * dt.abs()).sqrt();
        let mut out = x.clone();
        for ((o, v), s) in out.data_mut().iter_mut().zip(v.data()).zip(s.data()) {
            let xi: f64 = rng.sample(StandardNormal);
            *o += (v - 0.5 * w * s) * dt + amp * xi;
        }
        Ok(out)
    }
}

#[derive(Clone)]
pub struct SamplerRegistry {
    entries: BTreeMap<&'static str, Arc<dyn Sampler>>,
}

impl SamplerRegistry {
    pub fn builtin() -> Self {
        let mut r = SamplerRegistry { entries: BTreeMap::new() };
        r.register(Arc::new(EulerOde));
        r.register(Arc::new(HeunOde));
        r.register(Arc::new(EulerMaruyama));
        r
    }

    pub fn register(&mut self, s: Arc<dyn Sampler>) {
        self.entries.insert(s.name(), s);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Sampler>> {
        self.entries.get(name).cloned().ok_or_else(|| ZigmaError::UnknownStrategy {
            kind: "sampler",
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }
}

/// Integrates from `x1` at `t = 1` to `cfg.t_end`. `observe` sees the state
/// after every step (index 0 is the initial state).
pub fn sample(
    field: &dyn VelocityField,
    schedule: &InterpolantSchedule,
    cfg: &SamplerConfig,
    x1: Tensor,
    rng: &mut dyn RngCore,
    mut observe: Option<&mut dyn FnMut(usize, f64, &Tensor) -> Result<()>>,
) -> Result<Tensor> {
    cfg.validate()?;
    let sampler = SamplerRegistry::builtin().get(&cfg.kind)?;
    let grid = time_grid(cfg.steps, cfg.t_end);
    let mut x = x1;
    if let Some(f) = observe.as_mut() {
        f(0, grid[0], &x)?;
    }
    for k in 0..cfg.steps {
        x = sampler.step(field, schedule, cfg, &x, grid[k], grid[k + 1], rng)?;
        if let Some(pos) = x.data().iter().position(|v| !v.is_finite()) {
            return Err(ZigmaError::NonFinite {
                context: "sampler state",
                position: pos,
            });
        }
        if let Some(f) = observe.as_mut() {
            f(k + 1, grid[k + 1], &x)?;
        }
    }
    Ok(x)
}

/// A trained network read as a velocity field.
pub struct ModelField<'a> {
    pub net: &'a dyn Denoiser,
    pub params: &'a ParamStore,
    pub parameterization: Parameterization,
    pub schedule: InterpolantSchedule,
    pub labels: Option<Vec<usize>>,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        let batch = x.shape().first().copied().unwrap_or(0);
        let out = self.net.predict(&p, tape.constant(x.clone()), &vec![t; batch], self.labels.as_deref())?;
        let out = out.to_tensor();
        match self.parameterization {
            Parameterization::Velocity => Ok(out),
            // The conversion is singular at t = 1, so it is read just inside.
            Parameterization::Score => self.schedule.score_to_velocity(&out, x, t.min(1.0 - EPS_CLIP)),
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct TrajectoryManifest {
    pub steps: usize,
    pub kind: String,
    pub seed: u64,
}

/// Writes each observed state as `step_XXXXX` tensor dumps plus `manifest.json`.
pub struct TrajectoryRecorder {
    dir: PathBuf,
    manifest: TrajectoryManifest,
}

impl TrajectoryRecorder {
    pub fn new(dir: &Path, kind: &str, seed: u64) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(TrajectoryRecorder {
            dir: dir.to_path_buf(),
            manifest: TrajectoryManifest {
                steps: 0,
                kind: kind.to_string(),
                seed,
            },
        })
    }

    pub fn record(&mut self, k: usize, _t: f64, x: &Tensor) -> Result<()> {
        dump::save(&self.dir.join(format!("step_{k:05}")), x, DType::F64)?;
        self.manifest.steps = self.manifest.steps.max(k);
        Ok(())
    }

    pub fn finish(self) -> Result<TrajectoryManifest> {
        fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(self.manifest)
    }
}
