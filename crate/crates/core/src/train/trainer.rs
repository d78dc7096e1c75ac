use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use diffkit::{AdamW, AdamWConfig, Ema, ParamStore, StepOutcome, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{self, CheckpointData, TrainState};
use super::config::RunConfig;
use super::data::{Batch, SyntheticSpec};
use crate::error::{Result, ZigmaError};
use crate::interpolant::{Draw, InterpolantSchedule, Objective, ObjectiveRegistry};
use crate::model::{Conditioning, ZigMa};

/// Non-finite steps in a row that abort a run.
pub const NAN_ABORT_STREAK: u32 = 2;

/// One line of `metrics.jsonl`. Non-finite values serialize as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: Option<f64>,
    pub grad_norm: Option<f64>,
    pub ema_decay: Option<f64>,
}

/// Independent random streams per step so the batch sequence does not
/// depend on whether data are produced on another thread.
fn stream(seed: u64, step: u64, which: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * step + which);
    rng
}

pub fn data_batch(spec: &SyntheticSpec, seed: u64, step: u64, batch: usize) -> Batch {
    spec.sample(batch, &mut stream(seed, step, 0))
}

/// Worker threads allowed by `ZIGMA_THREADS` (unset: available cores).
pub fn thread_budget() -> usize {
    std::env::var("ZIGMA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: ZigMa,
    pub params: ParamStore,
    pub ema: Ema,
    pub opt: AdamW,
    pub step: u64,
    objective: Arc<dyn Objective>,
    schedule: InterpolantSchedule,
    nan_streak: u32,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = ZigMa::init(&cfg.model, cfg.optimizer.seed)?;
        let o = &cfg.optimizer;
        let opt = AdamW::new(
            AdamWConfig {
                lr: o.lr,
                weight_decay: o.weight_decay,
                clip_norm: Some(o.clip),
                ..AdamWConfig::default()
            },
            &params,
        );
        let ema = Ema::new(o.ema, &params);
        Ok(Trainer {
            objective: ObjectiveRegistry::builtin().get(&cfg.objective)?,
            schedule: cfg.schedule()?,
            cfg,
            model,
            params,
            ema,
            opt,
            step: 0,
            nan_streak: 0,
        })
    }

    /// Reopens the checkpoint in `dir`, restoring weights, shadow weights,
    /// optimizer moments and counters.
    pub fn resume(dir: &Path) -> Result<Self> {
        let loaded = checkpoint::load(dir)?;
        let mut t = Trainer::new(loaded.run)?;
        t.params = loaded.params;
        let (m, v) = checkpoint::load_moments(&dir.join("optimizer"), &t.params)?;
        t.opt.restore(m, v, loaded.state.optimizer_steps, loaded.state.rejected)?;
        t.ema.restore(&loaded.ema, loaded.state.ema_updates)?;
        t.step = loaded.state.step;
        Ok(t)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("checkpoint")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.cfg.out_dir.join("metrics.jsonl")
    }

    fn labels<'a>(&self, batch: &'a Batch) -> Option<&'a [usize]> {
        (self.cfg.model.conditioning != Conditioning::None).then_some(&batch.labels[..])
    }

    /// One optimisation step on `batch`. Returns the metrics; a second
    /// non-finite step in a row aborts.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let step = self.step;
        self.step += 1;
        let mut rng = stream(self.cfg.optimizer.seed, step, 1);
        let draw = Draw::sample(batch.images.clone(), self.objective.t_min(), &mut rng);
        self.opt.cfg.lr = self.cfg.optimizer.lr_at(step);

        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let outcome = self
            .objective
            .loss(&tape, &self.model, &p, &self.schedule, &draw, self.labels(batch))
            .and_then(|loss| {
                let grads = p.grads(&tape.backward(loss)?);
                Ok((loss.value().item(), grads))
            });
        let (loss, grads) = match outcome {
            Ok(v) => v,
            Err(ZigmaError::NonFinite { .. }) => return self.non_finite(step, None),
            Err(e) => return Err(e),
        };
        match self.opt.step(&mut self.params, grads)? {
            StepOutcome::Rejected => self.non_finite(step, Some(loss)),
            StepOutcome::Applied { grad_norm, .. } => {
                self.nan_streak = 0;
                let ema_decay = self.ema.update(&self.params);
                Ok(StepMetrics {
                    step,
                    loss: Some(loss),
                    grad_norm: Some(grad_norm),
                    ema_decay: Some(ema_decay),
                })
            }
        }
    }

    fn non_finite(&mut self, step: u64, loss: Option<f64>) -> Result<StepMetrics> {
        self.nan_streak += 1;
        if self.nan_streak >= NAN_ABORT_STREAK {
            return Err(ZigmaError::Aborted(format!(
                "non-finite loss or gradient on {} consecutive steps (last step {step}, loss {loss:?}); \
                 try a lower learning rate or check the dataset parameters",
                self.nan_streak
            )));
        }
        Ok(StepMetrics {
            step,
            loss: loss.filter(|l| l.is_finite()),
            grad_norm: None,
            ema_decay: None,
        })
    }

    pub fn save_checkpoint(&self) -> Result<()> {
        checkpoint::save(
            &self.checkpoint_dir(),
            &CheckpointData {
                run: &self.cfg,
                params: &self.params,
                ema: self.ema.shadow(),
                moments: self.opt.moments(),
                state: TrainState {
                    step: self.step,
                    optimizer_steps: self.opt.steps(),
                    rejected: self.opt.rejected(),
                    ema_updates: self.ema.updates(),
                },
            },
        )
    }

    /// Trains until `optimizer.steps`, appending to `metrics.jsonl` every
    /// `log_every` steps and checkpointing every `checkpoint_every` steps and
    /// at the end. Batches are produced on a helper thread unless
    /// `ZIGMA_THREADS=1`.
    pub fn run(&mut self) -> Result<Vec<StepMetrics>> {
        self.run_with_threads(thread_budget())
    }

    /// [`run`](Self::run) with an explicit thread count; the batch sequence
    /// is the same for every count.
    pub fn run_with_threads(&mut self, threads: usize) -> Result<Vec<StepMetrics>> {
        fs::create_dir_all(&self.cfg.out_dir)?;
        let metrics = if self.step == 0 {
            File::create(self.metrics_path())?
        } else {
            OpenOptions::new().append(true).create(true).open(self.metrics_path())?
        };
        let mut metrics = BufWriter::new(metrics);
        let (start, end) = (self.step, self.cfg.optimizer.steps);
        let spec = self.cfg.dataset.clone();
        let (seed, batch) = (self.cfg.optimizer.seed, self.cfg.optimizer.batch);
        let mut logged = Vec::new();

        let mut body = |trainer: &mut Trainer, b: Batch| -> Result<()> {
            let m = trainer.train_step(&b)?;
            if m.step % trainer.cfg.log_every == 0 || m.step + 1 == end {
                serde_json::to_writer(&mut metrics, &m)?;
                metrics.write_all(b"\n")?;
                logged.push(m);
            }
            if trainer.step % trainer.cfg.checkpoint_every == 0 || trainer.step == end {
                metrics.flush()?;
                trainer.save_checkpoint()?;
            }
            Ok(())
        };

        if threads <= 1 {
            for step in start..end {
                body(self, data_batch(&spec, seed, step, batch))?;
            }
        } else {
            std::thread::scope(|s| -> Result<()> {
                let (tx, rx) = sync_channel(4);
                s.spawn(move || {
                    for step in start..end {
                        if tx.send(data_batch(&spec, seed, step, batch)).is_err() {
                            break;
                        }
                    }
                });
                for b in rx.iter() {
                    body(self, b)?;
                }
                Ok(())
            })?;
        }
        metrics.flush()?;
        Ok(logged)
    }

    /// Mean objective value over `n` fresh samples from a fixed stream,
    /// evaluated with `params` (e.g. the shadow weights).
    pub fn eval_loss(&self, params: &ParamStore, n: usize, seed: u64) -> Result<f64> {
        let chunk = self.cfg.optimizer.batch.max(1);
        let mut total = 0.0;
        let mut done = 0;
        let mut k = 0;
        while done < n {
            let size = chunk.min(n - done);
            let b = self.cfg.dataset.sample(size, &mut stream(seed, u64::MAX / 4 - k, 0));
            let draw = Draw::sample(b.images.clone(), self.objective.t_min(), &mut stream(seed, u64::MAX / 4 - k, 1));
            let tape = Tape::no_grad();
            let p = params.bind(&tape);
            let loss = self.objective.loss(&tape, &self.model, &p, &self.schedule, &draw, self.labels(&b))?;
            total += loss.value().item() * size as f64;
            done += size;
            k += 1;
        }
        Ok(total / n as f64)
    }

    pub fn objective(&self) -> &dyn Objective {
        self.objective.as_ref()
    }
}
