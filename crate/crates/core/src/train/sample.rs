//! Drawing samples from a trained network and rendering them as PGM.

use std::fs;
use std::path::Path;

use diffkit::dump::{self, DType};
use diffkit::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, ZigmaError};
use crate::interpolant::{sample, InterpolantSchedule, ModelField, Parameterization, SamplerConfig};
use crate::model::{Conditioning, ZigMa};

/// Chains integrated together; bounds activation memory.
const CHUNK: usize = 64;

/// Integrates `n` chains from seeded Gaussian noise. Labels cycle through the
/// classes when the model is conditional.
pub fn generate(
    model: &ZigMa,
    params: &ParamStore,
    parameterization: Parameterization,
    schedule: &InterpolantSchedule,
    sampler: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<Tensor> {
    let cfg = &model.cfg;
    let shape = [n, cfg.channels, cfg.height, cfg.width];
    if n == 0 {
        return Ok(Tensor::zeros(&shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = cfg.channels * cfg.height * cfg.width;
    let mut out = Vec::with_capacity(n * per);
    let mut start = 0;
    while start < n {
        let size = CHUNK.min(n - start);
        let x1 = Tensor::from_fn(&[size, cfg.channels, cfg.height, cfg.width], |_| rng.sample(StandardNormal));
        let labels = (cfg.conditioning != Conditioning::None)
            .then(|| (start..start + size).map(|i| i % cfg.n_classes.max(1)).collect());
        let field = ModelField {
            net: model,
            params,
            parameterization,
            schedule: *schedule,
            labels,
        };
        out.extend(sample(&field, schedule, sampler, x1, &mut rng, None)?.into_vec());
        start += size;
    }
    Ok(Tensor::from_vec(&shape, out)?)
}

/// Binary greyscale PGM (`P5`, maxval 255) of one `[C, H, W]` sample, channels
/// side by side. Values are min-max normalised over the whole sample and
/// rounded; a constant sample renders as zeros.
pub fn encode_pgm(sample: &Tensor) -> Result<Vec<u8>> {
    let s = sample.shape();
    if s.len() != 3 {
        return Err(ZigmaError::Config(format!("expected [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let data = sample.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(ZigmaError::NonFinite {
            context: "pgm sample",
            position: data.iter().position(|v| !v.is_finite()).unwrap_or(0),
        });
    }
    let mut out = format!("P5\n{} {}\n255\n", c * w, h).into_bytes();
    for y in 0..h {
        for ch in 0..c {
            for x in 0..w {
                let v = data[(ch * h + y) * w + x];
                out.push(if hi > lo { (255.0 * (v - lo) / (hi - lo)).round() as u8 } else { 0 });
            }
        }
    }
    Ok(out)
}

/// Writes `samples.{bin,json}` and `sample_XXXXX.pgm` per sample into `dir`.
pub fn write_samples(dir: &Path, samples: &Tensor) -> Result<()> {
    let n = samples.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Ok(());
    }
    fs::create_dir_all(dir)?;
    dump::save(&dir.join("samples"), samples, DType::F32)?;
    let per = samples.numel() / n;
    let inner = &samples.shape()[1..];
    for i in 0..n {
        let one = Tensor::from_vec(inner, samples.data()[i * per..(i + 1) * per].to_vec())?;
        fs::write(dir.join(format!("sample_{i:05}.pgm")), encode_pgm(&one)?)?;
    }
    Ok(())
}
