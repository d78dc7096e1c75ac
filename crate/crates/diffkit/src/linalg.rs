//! Matrix products and row normalisation.

use crate::error::{DiffError, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(a.data(), b.data(), &mut out, m, k, n);
        let out = Tensor::new_unchecked(vec![m, n], out);
        Ok(self.tape.custom(&[self, other], out, move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm_nt_acc(g.data(), b.data(), &mut ga, m, n, k);
                Tensor::new_unchecked(vec![m, k], ga)
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm_tn_acc(a.data(), g.data(), &mut gb, m, k, n);
                Tensor::new_unchecked(vec![k, n], gb)
            });
            vec![ga, gb]
        }))
    }

    /// Applies `x · w (+ bias)` to the last axis of `x`, any leading shape.
    /// `w` is `[in, out]`.
    pub fn linear(self, w: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let shape = self.shape();
        let ws = w.shape();
        if shape.is_empty() || ws.len() != 2 || *shape.last().unwrap() != ws[0] {
            return Err(DiffError::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: ws,
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let y = self.reshape(&[rows, ws[0]])?.matmul(w)?;
        let y = match bias {
            Some(b) => y.add_row(b)?,
            None => y,
        };
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = ws[1];
        y.reshape(&out_shape)
    }

    /// Normalises each row of the last axis to zero mean and unit variance
    /// (variance + `eps` under the root), then applies the optional affine.
    pub fn layer_norm(self, gamma: Option<Var<'t>>, beta: Option<Var<'t>>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, d) = x.rows_cols();
        if x.rank() == 0 || d == 0 {
            return Err(DiffError::InvalidShape {
                op: "layer_norm",
                msg: format!("need at least one feature, got {:?}", x.shape()),
            });
        }
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = (var + eps).sqrt();
            // A constant row with eps = 0 has nothing to normalise; map it to zeros.
            let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            rstd[r] = inv;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let xhat = Tensor::new_unchecked(x.shape().to_vec(), xhat);
        let shape = x.shape().to_vec();
        let normed = self.tape.custom(&[self], xhat.clone(), move |g, _| {
            let mut gx = vec![0.0; rows * d];
            for r in 0..rows {
                let gr = &g.data()[r * d..(r + 1) * d];
                let xr = &xhat.data()[r * d..(r + 1) * d];
                let mg = gr.iter().sum::<f64>() / d as f64;
                let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    gx[r * d + j] = rstd[r] * (gr[j] - mg - xr[j] * mgx);
                }
            }
            vec![Some(Tensor::new_unchecked(shape.clone(), gx))]
        });
        let scaled = match gamma {
            Some(gm) => normed.mul_row(gm)?,
            None => normed,
        };
        match beta {
            Some(b) => scaled.add_row(b),
            None => Ok(scaled),
        }
    }

    /// Multiplies every row of the last axis by a `[cols]` vector.
    pub fn mul_row(self, scale: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let s = scale.value();
        let (rows, cols) = x.rows_cols();
        if s.rank() != 1 || s.numel() != cols {
            return Err(DiffError::ShapeMismatch {
                op: "mul_row",
                lhs: x.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let mut out = (*x).clone();
        for r in 0..rows {
            for (o, sv) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(s.data()) {
                *o *= sv;
            }
        }
        Ok(self.tape.custom(&[self, scale], out, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = g.clone();
                for r in 0..rows {
                    for (o, sv) in gx.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(s.data()) {
                        *o *= sv;
                    }
                }
                gx
            });
            let gs = needs[1].then(|| {
                let mut acc = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        acc[c] += g.data()[r * cols + c] * x.data()[r * cols + c];
                    }
                }
                Tensor::new_unchecked(vec![cols], acc)
            });
            vec![gx, gs]
        }))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(self) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        let mut y = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in y[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            for o in &mut y[r * cols..(r + 1) * cols] {
                *o /= z;
            }
        }
        let y = Tensor::new_unchecked(x.shape().to_vec(), y);
        let saved = y.clone();
        self.tape.custom(&[self], y, move |g, _| {
            let mut gx = g.clone();
            for r in 0..rows {
                let yr = &saved.data()[r * cols..(r + 1) * cols];
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    gx.data_mut()[r * cols + c] = yr[c] * (gr[c] - dot);
                }
            }
            vec![Some(gx)]
        })
    }
}
