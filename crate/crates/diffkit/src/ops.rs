//! Elementwise, reduction and reshaping operations on [`Var`].

use std::rc::Rc;

use crate::error::{DiffError, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// `sqrt(2 / pi)`, the slope constant of the tanh GELU approximation.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh GELU approximation.
pub const GELU_CUBIC: f64 = 0.044_715;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let th = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Unary activations with closed-form derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Tanh,
    Sigmoid,
    Silu,
    Softplus,
    Gelu,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => silu(x),
            Unary::Softplus => softplus(x),
            Unary::Gelu => gelu(x),
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Softplus => sigmoid(x),
            Unary::Gelu => gelu_grad(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// How the two operands of a binary op line up.
#[derive(Clone, Copy)]
enum Layout {
    Equal,
    LhsScalar,
    RhsScalar,
}

fn layout(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Layout> {
    if a.shape() == b.shape() {
        Ok(Layout::Equal)
    } else if a.is_scalar() {
        Ok(Layout::LhsScalar)
    } else if b.is_scalar() {
        Ok(Layout::RhsScalar)
    } else {
        Err(DiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn reduce_to(g: Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g
    } else {
        Tensor::new_unchecked(target.shape().to_vec(), vec![g.sum()])
    }
}

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, op: Binary) -> Result<Var<'t>> {
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let a = self.value();
        let b = other.value();
        let lay = layout(name, &a, &b)?;
        let f = move |x: f64, y: f64| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out = match lay {
            Layout::Equal => a.zip_map(&b, f),
            Layout::LhsScalar => {
                let s = a.item();
                b.map(|y| f(s, y))
            }
            Layout::RhsScalar => {
                let s = b.item();
                a.map(|x| f(x, s))
            }
        };
        let (sa, sb) = (Rc::clone(&a), Rc::clone(&b));
        Ok(self.tape.custom(&[self, other], out, move |g, needs| {
            let ga = needs[0].then(|| {
                let full = match op {
                    Binary::Add | Binary::Sub => g.clone(),
                    Binary::Mul => match lay {
                        Layout::Equal => g.zip_map(&sb, |g, y| g * y),
                        Layout::LhsScalar => g.zip_map(&sb, |g, y| g * y),
                        Layout::RhsScalar => {
                            let s = sb.item();
                            g.map(|g| g * s)
                        }
                    },
                };
                reduce_to(full, &sa)
            });
            let gb = needs[1].then(|| {
                let full = match op {
                    Binary::Add => g.clone(),
                    Binary::Sub => g.map(|g| -g),
                    Binary::Mul => match lay {
                        Layout::Equal | Layout::RhsScalar => g.zip_map(&sa, |g, x| g * x),
                        Layout::LhsScalar => {
                            let s = sa.item();
                            g.map(|g| g * s)
                        }
                    },
                };
                reduce_to(full, &sb)
            });
            vec![ga, gb]
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn unary(self, op: Unary) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(|v| op.apply(v)));
        let saved_y = Rc::clone(&y);
        self.tape.custom(&[self], (*y).clone(), move |g, _| {
            let mut out = g.clone();
            for ((o, &xi), &yi) in out.data_mut().iter_mut().zip(x.data()).zip(saved_y.data()) {
                *o *= op.derivative(xi, yi);
            }
            vec![Some(out)]
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Unary::Silu)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(Unary::Gelu)
    }

    /// Multiplies by a constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x * c);
        self.tape.custom(&[self], out, move |g, _| vec![Some(g.map(|g| g * c))])
    }

    /// Adds a constant.
    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.tape.custom(&[self], out, |g, _| vec![Some(g.clone())])
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.tape.custom(&[self], out, move |g, _| vec![Some(g.zip_map(&x, |g, x| 2.0 * g * x))])
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.custom(&[self], Tensor::scalar(x.sum()), move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean of squared differences.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        Ok(self.sub(target)?.square().mean())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.tape.custom(&[self], out, move |g, _| {
            vec![Some(Tensor::new_unchecked(orig.clone(), g.data().to_vec()))]
        }))
    }

    /// Row selection on the leading axis of a tensor viewed as `[rows, cols]`
    /// (cols = product of trailing dims). Output row `k` is input row `index[k]`.
    /// Repeated indices are allowed; their gradients accumulate.
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(DiffError::InvalidShape {
                op: "gather_rows",
                msg: "scalar input".into(),
            });
        }
        let rows = x.shape()[0];
        let cols = if rows == 0 { 0 } else { x.numel() / rows };
        let mut data = Vec::with_capacity(index.len() * cols);
        for &r in index {
            if r >= rows {
                return Err(DiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    extent: rows,
                });
            }
            data.extend_from_slice(&x.data()[r * cols..(r + 1) * cols]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = index.len();
        let out = Tensor::new_unchecked(shape, data);
        let index = index.to_vec();
        let in_shape = x.shape().to_vec();
        Ok(self.tape.custom(&[self], out, move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            let gd = g.data();
            let gxd = gx.data_mut();
            for (k, &r) in index.iter().enumerate() {
                for c in 0..cols {
                    gxd[r * cols + c] += gd[k * cols + c];
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Flat element gather: `out[k] = x.flat[index[k]]`, reshaped to `shape`.
    pub fn gather(self, index: &[usize], shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if shape.iter().product::<usize>() != index.len() {
            return Err(DiffError::DataLength {
                shape: shape.to_vec(),
                len: index.len(),
            });
        }
        let n = x.numel();
        let mut data = Vec::with_capacity(index.len());
        for &i in index {
            if i >= n {
                return Err(DiffError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    extent: n,
                });
            }
            data.push(x.data()[i]);
        }
        let out = Tensor::new_unchecked(shape.to_vec(), data);
        let index = index.to_vec();
        let in_shape = x.shape().to_vec();
        Ok(self.tape.custom(&[self], out, move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            let gxd = gx.data_mut();
            for (k, &i) in index.iter().enumerate() {
                gxd[i] += g.data()[k];
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat_rows(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.rank() == 0 || a.rank() != b.rank() || a.shape()[1..] != b.shape()[1..] {
            return Err(DiffError::ShapeMismatch {
                op: "concat_rows",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut shape = a.shape().to_vec();
        shape[0] += b.shape()[0];
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let out = Tensor::new_unchecked(shape, data);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let split = a.numel();
        Ok(self.tape.custom(&[self, other], out, move |g, needs| {
            let ga = needs[0].then(|| Tensor::new_unchecked(sa.clone(), g.data()[..split].to_vec()));
            let gb = needs[1].then(|| Tensor::new_unchecked(sb.clone(), g.data()[split..].to_vec()));
            vec![ga, gb]
        }))
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_last(self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        if start > end || end > cols || x.rank() == 0 {
            return Err(DiffError::InvalidShape {
                op: "slice_last",
                msg: format!("range {start}..{end} on shape {:?}", x.shape()),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * cols + start..r * cols + end]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let out = Tensor::new_unchecked(shape, data);
        let in_shape = x.shape().to_vec();
        Ok(self.tape.custom(&[self], out, move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            let gxd = gx.data_mut();
            for r in 0..rows {
                gxd[r * cols + start..r * cols + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat_last(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (ra, ca) = a.rows_cols();
        let (rb, cb) = b.rows_cols();
        if a.rank() == 0 || a.rank() != b.rank() || a.shape()[..a.rank() - 1] != b.shape()[..b.rank() - 1] || ra != rb {
            return Err(DiffError::ShapeMismatch {
                op: "concat_last",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for r in 0..ra {
            data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let out = Tensor::new_unchecked(shape, data);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape.custom(&[self, other], out, move |g, needs| {
            let w = ca + cb;
            let ga = needs[0].then(|| {
                let d = (0..ra).flat_map(|r| g.data()[r * w..r * w + ca].iter().copied()).collect();
                Tensor::new_unchecked(sa.clone(), d)
            });
            let gb = needs[1].then(|| {
                let d = (0..ra).flat_map(|r| g.data()[r * w + ca..(r + 1) * w].iter().copied()).collect();
                Tensor::new_unchecked(sb.clone(), d)
            });
            vec![ga, gb]
        }))
    }

    /// Adds a `[cols]` vector to every row of a `[.., cols]` tensor.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        let (rows, cols) = x.rows_cols();
        if b.rank() != 1 || b.numel() != cols {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = (*x).clone();
        for r in 0..rows {
            for (o, bv) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.tape.custom(&[self, bias], out, move |g, needs| {
            let gx = needs[0].then(|| g.clone());
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; cols];
                for r in 0..rows {
                    for (a, gv) in acc.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                        *a += gv;
                    }
                }
                Tensor::new_unchecked(vec![cols], acc)
            });
            vec![gx, gb]
        }))
    }

    /// Repeats each leading-axis slice `reps` times:
    /// `[B, C] -> [B * reps, C]` with output row `b * reps + r` equal to row `b`.
    pub fn repeat_rows(self, reps: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(DiffError::InvalidShape {
                op: "repeat_rows",
                msg: "scalar input".into(),
            });
        }
        let rows = x.shape()[0];
        let index: Vec<usize> = (0..rows).flat_map(|b| std::iter::repeat_n(b, reps)).collect();
        self.gather_rows(&index)
    }

    /// Mean over the middle axis of a `[B, L, C]` tensor, giving `[B, C]`.
    pub fn mean_middle(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 3 || x.shape()[1] == 0 {
            return Err(DiffError::InvalidShape {
                op: "mean_middle",
                msg: format!("expected [B, L>0, C], got {:?}", x.shape()),
            });
        }
        let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for li in 0..l {
                let row = &x.data()[(bi * l + li) * c..(bi * l + li + 1) * c];
                for (o, v) in out[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                    *o += v / l as f64;
                }
            }
        }
        let out = Tensor::new_unchecked(vec![b, c], out);
        Ok(self.tape.custom(&[self], out, move |g, _| {
            let mut gx = Tensor::zeros(&[b, l, c]);
            for bi in 0..b {
                for li in 0..l {
                    for ci in 0..c {
                        gx.data_mut()[(bi * l + li) * c + ci] = g.data()[bi * c + ci] / l as f64;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}
