//! Synthetic image datasets with known distributions.

use diffkit::Tensor;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZigmaError};
use crate::interpolant::GaussianField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    /// Independent pixels `N(μ_p, std²)` with `μ_p = mean + gradient · (u − ½)`,
    /// `u ∈ [0, 1]` the horizontal position, plus `class_shift · label`.
    GaussianField {
        mean: f64,
        std: f64,
        #[serde(default)]
        gradient: f64,
        #[serde(default)]
        class_shift: f64,
    },
    /// A `modes × modes` grid of mixture centres in the plane; the left half
    /// of the image holds the first coordinate, the right half the second.
    /// The label is the mode index modulo the class count.
    GaussianMixtureGrid { modes: usize, spacing: f64, std: f64 },
    /// A `squares × squares` board of `low`/`high` cells with a random phase
    /// (the label) and per-pixel noise.
    CheckerboardImage {
        squares: usize,
        low: f64,
        high: f64,
        #[serde(default)]
        noise: f64,
    },
    /// Every sample is the constant image `value`.
    Dirac { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub n_classes: usize,
    pub distribution: Distribution,
}

/// Images `[B, C, H, W]` with their labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl SyntheticSpec {
    pub fn gaussian_field(channels: usize, height: usize, width: usize, mean: f64, std: f64) -> Self {
        SyntheticSpec {
            channels,
            height,
            width,
            n_classes: 0,
            distribution: Distribution::GaussianField {
                mean,
                std,
                gradient: 0.0,
                class_shift: 0.0,
            },
        }
    }

    pub fn dirac(channels: usize, height: usize, width: usize, value: f64) -> Self {
        SyntheticSpec {
            channels,
            height,
            width,
            n_classes: 0,
            distribution: Distribution::Dirac { value },
        }
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_len() == 0 {
            return Err(ZigmaError::Config("dataset dims must be positive".into()));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let ok = match &self.distribution {
            Distribution::GaussianField {
                mean,
                std,
                gradient,
                class_shift,
            } => finite(&[*mean, *std, *gradient, *class_shift]) && *std >= 0.0,
            Distribution::GaussianMixtureGrid { modes, spacing, std } => *modes > 0 && finite(&[*spacing, *std]) && *std >= 0.0,
            Distribution::CheckerboardImage { squares, low, high, noise } => {
                *squares > 0 && finite(&[*low, *high, *noise]) && *noise >= 0.0
            }
            Distribution::Dirac { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(ZigmaError::Config(format!("invalid distribution parameters {:?}", self.distribution)))
        }
    }

    fn label(&self, rng: &mut dyn RngCore) -> usize {
        if self.n_classes > 0 {
            rng.random_range(0..self.n_classes)
        } else {
            0
        }
    }

    /// Draws `batch` samples.
    pub fn sample(&self, batch: usize, rng: &mut dyn RngCore) -> Batch {
        let (c, h, w) = (self.channels, self.height, self.width);
        let per = self.sample_len();
        let mut data = Vec::with_capacity(batch * per);
        let mut labels = Vec::with_capacity(batch);
        for _ in 0..batch {
            match &self.distribution {
                Distribution::GaussianField {
                    mean,
                    std,
                    gradient,
                    class_shift,
                } => {
                    let label = self.label(rng);
                    for i in 0..per {
                        let mu = pixel_mean(*mean, *gradient, i % w, w) + class_shift * label as f64;
                        data.push(mu + std * rng.sample::<f64, _>(StandardNormal));
                    }
                    labels.push(label);
                }
                Distribution::GaussianMixtureGrid { modes, spacing, std } => {
                    let (i, j) = (rng.random_range(0..*modes), rng.random_range(0..*modes));
                    let centre = |k: usize| (k as f64 - (*modes as f64 - 1.0) / 2.0) * spacing;
                    for p in 0..per {
                        let x = p % w;
                        let base = if 2 * x < w { centre(i) } else { centre(j) };
                        data.push(base + std * rng.sample::<f64, _>(StandardNormal));
                    }
                    labels.push(if self.n_classes > 0 { (i * modes + j) % self.n_classes } else { 0 });
                }
                Distribution::CheckerboardImage { squares, low, high, noise } => {
                    let phase = rng.random_range(0..2usize);
                    for p in 0..per {
                        let (y, x) = ((p / w) % h, p % w);
                        let cell = (y * squares / h + x * squares / w + phase) % 2;
                        let v = if cell == 0 { *low } else { *high };
                        data.push(v + noise * rng.sample::<f64, _>(StandardNormal));
                    }
                    labels.push(if self.n_classes > 0 { phase % self.n_classes } else { 0 });
                }
                Distribution::Dirac { value } => {
                    data.extend(std::iter::repeat_n(*value, per));
                    labels.push(self.label(rng));
                }
            }
        }
        Batch {
            images: Tensor::from_vec(&[batch, c, h, w], data).expect("sizes agree by construction"),
            labels,
        }
    }

    /// Per-element moments for datasets with an independent Gaussian law.
    pub fn gaussian_moments(&self) -> Option<GaussianField> {
        match &self.distribution {
            Distribution::GaussianField {
                mean,
                std,
                gradient,
                class_shift,
            } if *class_shift == 0.0 || self.n_classes <= 1 => {
                let per = self.sample_len();
                let means = (0..per).map(|i| pixel_mean(*mean, *gradient, i % self.width, self.width)).collect();
                GaussianField::new(means, vec![*std; per]).ok()
            }
            Distribution::Dirac { value } => GaussianField::new(vec![*value; self.sample_len()], vec![0.0; self.sample_len()]).ok(),
            _ => None,
        }
    }
}

fn pixel_mean(mean: f64, gradient: f64, x: usize, w: usize) -> f64 {
    let u = if w > 1 { x as f64 / (w - 1) as f64 } else { 0.5 };
    mean + gradient * (u - 0.5)
}
