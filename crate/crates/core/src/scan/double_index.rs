//! Per-layer arrange/rearrange with consecutive index operations fused.
//!
//! Naively layer `i` gathers tokens by `Ω_i` before its sequence model and
//! by `Ω̄_i` afterwards. Since everything between two sequence models acts
//! token-wise, the stream can stay in the previous layer's order and be
//! re-indexed once with `Ω̄_{i-1} ∘ Ω_i`, finishing with `Ω̄_last`.

use super::{Permutation, ScanError};

/// The fused gathers for a stack of per-layer scan orders.
#[derive(Debug, Clone)]
pub struct LayerOrders {
    layers: Vec<Permutation>,
    fused: Vec<Permutation>,
    restore: Permutation,
}

impl LayerOrders {
    pub fn new(layers: Vec<Permutation>) -> Result<Self, ScanError> {
        let n = layers.first().map_or(0, Permutation::len);
        let mut fused = Vec::with_capacity(layers.len());
        let mut prev_back = Permutation::identity(n);
        for p in &layers {
            fused.push(prev_back.compose(p)?);
            prev_back = p.inverse();
        }
        Ok(LayerOrders {
            layers,
            fused,
            restore: prev_back,
        })
    }

    /// `Ω_i`.
    pub fn layer(&self, i: usize) -> &Permutation {
        &self.layers[i]
    }

    /// `Ω̄_{i-1} ∘ Ω_i` (with `Ω̄_{-1} = I`).
    pub fn fused(&self, i: usize) -> &Permutation {
        &self.fused[i]
    }

    /// `Ω̄_last`, returning the stream to natural order.
    pub fn restore(&self) -> &Permutation {
        &self.restore
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Gathers performed by the fused form: one per layer plus the final restore.
    pub fn fused_gather_count(&self) -> usize {
        self.layers.len() + 1
    }
}

/// Applies arrange then rearrange-back for each layer in turn, the
/// reference against which the fused form is checked.
pub fn arrange_naive<T: Clone>(items: &[T], layers: &[Permutation], mut f: impl FnMut(usize, Vec<T>) -> Vec<T>) -> Result<Vec<T>, ScanError> {
    let mut cur = items.to_vec();
    for (i, p) in layers.iter().enumerate() {
        let arranged = p.apply_slice(&cur)?;
        let processed = f(i, arranged);
        cur = p.inverse().apply_slice(&processed)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fused_matches_sequential_two_step() {
        let p0 = Permutation::new(vec![2, 0, 3, 1]).unwrap();
        let p1 = Permutation::new(vec![1, 3, 0, 2]).unwrap();
        let orders = LayerOrders::new(vec![p0.clone(), p1.clone()]).unwrap();
        let x = vec!['a', 'b', 'c', 'd'];
        let two_step = p1.apply_slice(&p0.inverse().apply_slice(&p0.apply_slice(&x).unwrap()).unwrap()).unwrap();
        let fused = orders.fused(1).apply_slice(&p0.apply_slice(&x).unwrap()).unwrap();
        assert_eq!(two_step, fused);
    }

    #[test]
    fn empty_stack_restores_identity() {
        let orders = LayerOrders::new(vec![]).unwrap();
        assert!(orders.restore().is_identity());
        assert_eq!(orders.fused_gather_count(), 1);
    }
}
