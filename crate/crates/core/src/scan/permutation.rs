use diffkit::{Tensor, Var};

use super::ScanError;

/// Bijection on token positions with its inverse cached.
///
/// `order[k]` is the source position visited at step `k`; applying the
/// permutation to a token sequence gathers `out[k] = tokens[order[k]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
    inverse: Vec<usize>,
}

/// Checks that `order` is a bijection on `0..order.len()` and returns its inverse.
pub fn invert(order: &[usize]) -> Result<Vec<usize>, ScanError> {
    let n = order.len();
    let mut inverse = vec![usize::MAX; n];
    for (k, &o) in order.iter().enumerate() {
        if o >= n {
            return Err(ScanError::OutOfRange { index: o, len: n });
        }
        if inverse[o] != usize::MAX {
            return Err(ScanError::Repeated { index: o });
        }
        inverse[o] = k;
    }
    Ok(inverse)
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self, ScanError> {
        let inverse = invert(&order)?;
        Ok(Permutation { order, inverse })
    }

    pub fn identity(n: usize) -> Self {
        let order: Vec<usize> = (0..n).collect();
        Permutation {
            inverse: order.clone(),
            order,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn inverse_order(&self) -> &[usize] {
        &self.inverse
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(k, &o)| k == o)
    }

    pub fn inverse(&self) -> Permutation {
        Permutation {
            order: self.inverse.clone(),
            inverse: self.order.clone(),
        }
    }

    /// `(self ∘ q).order[k] = self.order[q.order[k]]`.
    ///
    /// Applying `self` and then `q` to a sequence equals applying the
    /// composition once.
    pub fn compose(&self, q: &Permutation) -> Result<Permutation, ScanError> {
        if self.len() != q.len() {
            return Err(ScanError::LengthMismatch {
                expected: self.len(),
                got: q.len(),
            });
        }
        let order: Vec<usize> = q.order.iter().map(|&k| self.order[k]).collect();
        let mut inverse = vec![0; order.len()];
        for (k, &o) in order.iter().enumerate() {
            inverse[o] = k;
        }
        Ok(Permutation { order, inverse })
    }

    /// Extends to a longer sequence whose first `prefix` positions stay fixed
    /// and whose remaining positions are permuted by `self`.
    pub fn with_fixed_prefix(&self, prefix: usize) -> Permutation {
        let order: Vec<usize> = (0..prefix).chain(self.order.iter().map(|&o| o + prefix)).collect();
        let inverse: Vec<usize> = (0..prefix).chain(self.inverse.iter().map(|&o| o + prefix)).collect();
        Permutation { order, inverse }
    }

    pub fn apply_slice<T: Clone>(&self, items: &[T]) -> Result<Vec<T>, ScanError> {
        if items.len() != self.len() {
            return Err(ScanError::LengthMismatch {
                expected: self.len(),
                got: items.len(),
            });
        }
        Ok(self.order.iter().map(|&k| items[k].clone()).collect())
    }

    /// Row indices into a flattened `[batch * M, C]` token matrix.
    pub fn batched_rows(&self, batch: usize) -> Vec<usize> {
        let m = self.len();
        (0..batch)
            .flat_map(|b| self.order.iter().map(move |&k| b * m + k))
            .collect()
    }

    /// `out[b, k, :] = tokens[b, order[k], :]` on a `[B, M, C]` tensor.
    pub fn apply(&self, tokens: &Tensor) -> Result<Tensor, ScanError> {
        let (b, m, c) = bmc(tokens.shape())?;
        if m != self.len() {
            return Err(ScanError::LengthMismatch {
                expected: self.len(),
                got: m,
            });
        }
        let src = tokens.data();
        let mut out = Vec::with_capacity(src.len());
        for bi in 0..b {
            for &k in &self.order {
                let row = (bi * m + k) * c;
                out.extend_from_slice(&src[row..row + c]);
            }
        }
        Ok(Tensor::from_vec(tokens.shape(), out).expect("shape preserved"))
    }

    /// Differentiable [`apply`](Self::apply) on a `[B, M, C]` variable.
    pub fn apply_var<'t>(&self, tokens: Var<'t>) -> crate::Result<Var<'t>> {
        let shape = tokens.shape();
        let (b, m, c) = bmc(&shape)?;
        if m != self.len() {
            return Err(ScanError::LengthMismatch {
                expected: self.len(),
                got: m,
            }
            .into());
        }
        let rows = tokens.reshape(&[b * m, c])?.gather_rows(&self.batched_rows(b))?;
        Ok(rows.reshape(&shape)?)
    }
}

fn bmc(shape: &[usize]) -> Result<(usize, usize, usize), ScanError> {
    match *shape {
        [b, m, c] => Ok((b, m, c)),
        _ => Err(ScanError::BadTokens(shape.to_vec())),
    }
}
