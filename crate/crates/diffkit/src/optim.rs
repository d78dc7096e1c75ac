//! AdamW with global-norm clipping, plus an exponential moving average of weights.

use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(2.0),
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied {
        /// Global norm before clipping.
        grad_norm: f64,
        /// Factor the gradients were multiplied by (1 when not clipped).
        clip_scale: f64,
    },
    /// A gradient held NaN or Inf; parameters and moments are untouched.
    Rejected,
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping and the factor applied.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> (f64, f64) {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
        (norm, s)
    } else {
        (norm, 1.0)
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    rejected: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamW {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
            rejected: 0,
        }
    }

    /// Number of applied steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of steps rejected for non-finite gradients.
    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores saved state, e.g. when resuming from a checkpoint.
    pub fn restore(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, step: u64, rejected: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(DiffError::Format("optimizer state arity mismatch".into()));
        }
        for (a, b) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            if a.shape() != b.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "AdamW::restore",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        self.m = m;
        self.v = v;
        self.step = step;
        self.rejected = rejected;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamStore, mut grads: Vec<Tensor>) -> Result<StepOutcome> {
        if grads.len() != params.len() {
            return Err(DiffError::Format(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.tensors().iter().zip(&grads) {
            if p.shape() != g.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "AdamW::step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        if !grads.iter().all(Tensor::all_finite) {
            self.rejected += 1;
            return Ok(StepOutcome::Rejected);
        }
        let (grad_norm, clip_scale) = match self.cfg.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => (global_norm(&grads), 1.0),
        };
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(&grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *pv);
            }
        }
        Ok(StepOutcome::Applied { grad_norm, clip_scale })
    }
}

/// Shadow copy of the parameters tracking an exponential moving average.
///
/// The effective decay warms up as `min(rate, (1 + n) / (10 + n))` for the
/// `n`-th update so early shadows are not dominated by the initialisation.
#[derive(Debug, Clone)]
pub struct Ema {
    pub rate: f64,
    shadow: ParamStore,
    updates: u64,
}

impl Ema {
    pub fn new(rate: f64, params: &ParamStore) -> Self {
        Ema {
            rate,
            shadow: params.clone(),
            updates: 0,
        }
    }

    pub fn decay_at(&self, n: u64) -> f64 {
        self.rate.min((1.0 + n as f64) / (10.0 + n as f64))
    }

    /// Blends the current parameters into the shadow; returns the decay used.
    pub fn update(&mut self, params: &ParamStore) -> f64 {
        let d = self.decay_at(self.updates);
        self.updates += 1;
        for (s, p) in self.shadow.tensors_mut().iter_mut().zip(params.tensors()) {
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
        d
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn restore(&mut self, shadow: &ParamStore, updates: u64) -> Result<()> {
        self.shadow.load_from(shadow)?;
        self.updates = updates;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::from_vec(&[1], vec![v]).unwrap());
        s
    }

    #[test]
    fn clipping_halves_norm_four_gradient() {
        let mut g = vec![Tensor::from_vec(&[2], vec![0.0, 4.0]).unwrap()];
        let (norm, scale) = clip_global_norm(&mut g, 2.0);
        assert_eq!(norm, 4.0);
        assert_eq!(scale, 0.5);
        assert_eq!(g[0].data(), &[0.0, 2.0]);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = scalar_store(3.0);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() }, &p);
        let g = vec![Tensor::from_vec(&[1], vec![123.0]).unwrap()];
        opt.step(&mut p, g).unwrap();
        assert_eq!(p.tensors()[0].data(), &[3.0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let g = vec![Tensor::from_vec(&[1], vec![f64::NAN]).unwrap()];
        assert_eq!(opt.step(&mut p, g).unwrap(), StepOutcome::Rejected);
        assert_eq!(opt.rejected(), 1);
        assert_eq!(opt.steps(), 0);
        assert_eq!(p.tensors()[0].data(), &[1.0]);
    }

    #[test]
    fn quadratic_converges_to_minimizer() {
        // loss = (x - 0.5)^2 from x = 0; Adam moves about lr per step, so the
        // start sits well within the 200-step reach.
        let target = 0.5;
        let mut p = scalar_store(0.0);
        let cfg = AdamWConfig {
            lr: 1e-2,
            clip_norm: None,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        for _ in 0..200 {
            let x = p.tensors()[0].data()[0];
            let g = vec![Tensor::from_vec(&[1], vec![2.0 * (x - target)]).unwrap()];
            opt.step(&mut p, g).unwrap();
        }
        let x = p.tensors()[0].data()[0];
        assert!((x - target).abs() < 1e-3, "x = {x}");
    }

    #[test]
    fn ema_converges_to_stationary_weights() {
        let p0 = scalar_store(0.0);
        let mut ema = Ema::new(0.9, &p0);
        let p = scalar_store(2.0);
        for _ in 0..400 {
            ema.update(&p);
        }
        assert!((ema.shadow().tensors()[0].data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ema_decay_warms_up_to_rate() {
        let p = scalar_store(0.0);
        let ema = Ema::new(0.9999, &p);
        assert_eq!(ema.decay_at(0), 0.1);
        assert!(ema.decay_at(10) < 0.9999);
        assert_eq!(ema.decay_at(10_000_000), 0.9999);
    }
}
