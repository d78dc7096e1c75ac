//! Patch (un)folding and fixed embeddings.

use diffkit::{Tensor, Var};

use crate::error::{Result, ZigmaError};

/// Flat source index of every patch-token feature of a `[B, C, H, W]` image.
/// Token `gy * (W/p) + gx` holds features in `(c, py, px)` order.
pub fn patch_index(batch: usize, c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(ZigmaError::Config(format!("{h}x{w} image is not divisible by patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(batch * c * h * w);
    for b in 0..batch {
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            idx.push(((b * c + ch) * h + gy * p + py) * w + gx * p + px);
                        }
                    }
                }
            }
        }
    }
    Ok(idx)
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(ZigmaError::Config(format!("expected [B, C, H, W], got {shape:?}"))),
    }
}

/// `[B, C, H, W] -> [B, HW/p², C·p²]`.
pub fn patchify(img: Var<'_>, p: usize) -> Result<Var<'_>> {
    let (b, c, h, w) = image_dims(&img.shape())?;
    let idx = patch_index(b, c, h, w, p)?;
    Ok(img.gather(&idx, &[b, (h / p) * (w / p), c * p * p])?)
}

/// Inverse of [`patchify`] back to `[B, C, H, W]`.
pub fn unpatchify(tokens: Var<'_>, c: usize, h: usize, w: usize, p: usize) -> Result<Var<'_>> {
    let b = tokens.shape().first().copied().unwrap_or(0);
    let idx = patch_index(b, c, h, w, p)?;
    let mut inv = vec![0; idx.len()];
    for (k, &src) in idx.iter().enumerate() {
        inv[src] = k;
    }
    Ok(tokens.gather(&inv, &[b, c, h, w])?)
}

/// Sinusoidal features of `t ∈ [0, 1]`, scaled to the conventional
/// `[0, 1000]` step range: `[cos(1000 t f_i), sin(1000 t f_i)]`.
pub fn timestep_features(t: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[t.len(), dim], |i| {
        let (row, col) = (i / dim, i % dim);
        if col >= 2 * half {
            return 0.0;
        }
        let k = col % half;
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let arg = 1000.0 * t[row] * freq;
        if col < half {
            arg.cos()
        } else {
            arg.sin()
        }
    })
}

/// Fixed 2-D sin-cos position table `[gw·gh, d]`: the first half of the
/// channels encodes the column, the second half the row.
pub fn sincos_2d(gw: usize, gh: usize, d: usize) -> Tensor {
    let quarter = (d / 4).max(1);
    Tensor::from_fn(&[gw * gh, d], |i| {
        let (tok, ch) = (i / d, i % d);
        let (gx, gy) = ((tok % gw) as f64, (tok / gw) as f64);
        let (pos, c) = if ch < d / 2 { (gx, ch) } else { (gy, ch - d / 2) };
        let k = c % quarter;
        let omega = 1.0 / 10_000f64.powf(k as f64 / quarter as f64);
        if c < quarter {
            (pos * omega).sin()
        } else if c < 2 * quarter {
            (pos * omega).cos()
        } else {
            0.0
        }
    })
}
