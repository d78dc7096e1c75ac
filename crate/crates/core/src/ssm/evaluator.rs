//! Forward kernels for the diagonal selective recurrence
//!
//! ```text
//! h_k = exp(Δ_k A) ⊙ h_{k-1} + Δ_k B_k u_k,   y_k = C_k · h_k + D u_k,   h_{-1} = 0
//! ```
//!
//! evaluated independently for every batch element and inner channel.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Result, ZigmaError};

/// Borrowed inputs of one recurrence evaluation. Layouts are row-major:
/// `u`, `delta`: `[batch, len, channels]`; `a`: `[channels, state]`;
/// `b`, `c`: `[batch, len, state]`; `d`: `[channels]`.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a> {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: &'a [f64],
}

impl ScanInputs<'_> {
    pub fn check(&self) -> Result<()> {
        let (bl, n) = (self.batch * self.len, self.state);
        let want = [
            ("u", self.u.len(), bl * self.channels),
            ("delta", self.delta.len(), bl * self.channels),
            ("A", self.a.len(), self.channels * n),
            ("B", self.b.len(), bl * n),
            ("C", self.c.len(), bl * n),
            ("D", self.d.len(), self.channels),
        ];
        for (name, got, expected) in want {
            if got != expected {
                return Err(ZigmaError::Config(format!(
                    "selective scan input {name} has {got} values, expected {expected}"
                )));
            }
        }
        if n == 0 {
            return Err(ZigmaError::Config("state size must be at least 1".into()));
        }
        Ok(())
    }

    fn ubar(&self, bi: usize, k: usize, ch: usize, s: usize) -> (f64, f64) {
        let row = bi * self.len + k;
        let dt = self.delta[row * self.channels + ch];
        let abar = (dt * self.a[ch * self.state + s]).exp();
        (abar, dt * self.b[row * self.state + s] * self.u[row * self.channels + ch])
    }

    /// `[batch, len, channels, state]` offset of `h`.
    pub fn state_index(&self, bi: usize, k: usize, ch: usize, s: usize) -> usize {
        ((bi * self.len + k) * self.channels + ch) * self.state + s
    }
}

/// A forward evaluator of the recurrence.
pub trait SsmEvaluator: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns `y` as `[batch, len, channels]`. When `states` is given it
    /// receives every `h_k` in `[batch, len, channels, state]` layout.
    fn run(&self, inp: &ScanInputs<'_>, states: Option<&mut [f64]>) -> Result<Vec<f64>>;
}

/// Reference step-by-step recurrence.
pub struct Sequential;

impl SsmEvaluator for Sequential {
    fn name(&self) -> &'static str {
        "sequential"
    }

    fn run(&self, inp: &ScanInputs<'_>, mut states: Option<&mut [f64]>) -> Result<Vec<f64>> {
        inp.check()?;
        let (l, dch, n) = (inp.len, inp.channels, inp.state);
        let mut y = vec![0.0; inp.batch * l * dch];
        let mut h = vec![0.0; n];
        for bi in 0..inp.batch {
            for ch in 0..dch {
                h.fill(0.0);
                for k in 0..l {
                    let row = bi * l + k;
                    let mut acc = inp.d[ch] * inp.u[row * dch + ch];
                    for (s, hs) in h.iter_mut().enumerate() {
                        let (abar, bu) = inp.ubar(bi, k, ch, s);
                        *hs = abar * *hs + bu;
                        acc += inp.c[row * n + s] * *hs;
                    }
                    if let Some(st) = states.as_deref_mut() {
                        let at = inp.state_index(bi, k, ch, 0);
                        st[at..at + n].copy_from_slice(&h);
                    }
                    y[row * dch + ch] = acc;
                }
            }
        }
        check_finite(&y, l, dch)?;
        Ok(y)
    }
}

/// Work-efficient (Blelloch) prefix scan over the associative operator
/// `(a1, b1) ∘ (a2, b2) = (a1 a2, a2 b1 + b2)`.
///
/// Each lane is padded to a power of two with the identity `(1, 0)` so the
/// reduction tree depends only on the length, which keeps results
/// reproducible bit for bit.
pub struct Parallel;

#[inline]
fn combine(x: (f64, f64), y: (f64, f64)) -> (f64, f64) {
    (x.0 * y.0, y.0 * x.1 + y.1)
}

/// Inclusive scan in place; `lane.len()` must be a power of two.
fn blelloch(lane: &mut [(f64, f64)], scratch: &mut Vec<(f64, f64)>) {
    let p = lane.len();
    scratch.clear();
    scratch.extend_from_slice(lane);
    let mut stride = 1;
    while stride < p {
        let mut i = 2 * stride - 1;
        while i < p {
            scratch[i] = combine(scratch[i - stride], scratch[i]);
            i += 2 * stride;
        }
        stride *= 2;
    }
    scratch[p - 1] = (1.0, 0.0);
    stride = p / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < p {
            let left = scratch[i - stride];
            scratch[i - stride] = scratch[i];
            scratch[i] = combine(scratch[i], left);
            i += 2 * stride;
        }
        stride /= 2;
    }
    for (x, excl) in lane.iter_mut().zip(scratch.iter()) {
        *x = combine(*excl, *x);
    }
}

impl SsmEvaluator for Parallel {
    fn name(&self) -> &'static str {
        "parallel"
    }

    fn run(&self, inp: &ScanInputs<'_>, mut states: Option<&mut [f64]>) -> Result<Vec<f64>> {
        inp.check()?;
        let (l, dch, n) = (inp.len, inp.channels, inp.state);
        let mut y = vec![0.0; inp.batch * l * dch];
        let p = l.next_power_of_two();
        let mut lane = vec![(1.0, 0.0); p];
        let mut scratch = Vec::with_capacity(p);
        for bi in 0..inp.batch {
            for ch in 0..dch {
                for k in 0..l {
                    let row = bi * l + k;
                    y[row * dch + ch] = inp.d[ch] * inp.u[row * dch + ch];
                }
                for s in 0..n {
                    lane.fill((1.0, 0.0));
                    for (k, slot) in lane.iter_mut().enumerate().take(l) {
                        *slot = inp.ubar(bi, k, ch, s);
                    }
                    blelloch(&mut lane, &mut scratch);
                    for (k, &(_, h)) in lane.iter().enumerate().take(l) {
                        let row = bi * l + k;
                        y[row * dch + ch] += inp.c[row * n + s] * h;
                        if let Some(st) = states.as_deref_mut() {
                            st[inp.state_index(bi, k, ch, s)] = h;
                        }
                    }
                }
            }
        }
        check_finite(&y, l, dch)?;
        Ok(y)
    }
}

fn check_finite(y: &[f64], len: usize, channels: usize) -> Result<()> {
    match y.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(ZigmaError::NonFinite {
            context: "selective scan",
            position: (i / channels) % len.max(1),
        }),
    }
}

/// Evaluators addressable by name.
pub struct EvaluatorRegistry {
    entries: BTreeMap<&'static str, Arc<dyn SsmEvaluator>>,
}

impl EvaluatorRegistry {
    pub fn builtin() -> Self {
        let mut r = EvaluatorRegistry { entries: BTreeMap::new() };
        r.register(Arc::new(Sequential));
        r.register(Arc::new(Parallel));
        r
    }

    pub fn register(&mut self, e: Arc<dyn SsmEvaluator>) {
        self.entries.insert(e.name(), e);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn SsmEvaluator>> {
        self.entries.get(name).cloned().ok_or_else(|| ZigmaError::UnknownStrategy {
            kind: "ssm evaluator",
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Ā = 0.5 and B̄ = 1 via Δ = 1, A = ln 0.5, B = 1.
    fn toy(u: &[f64]) -> Vec<f64> {
        let l = u.len();
        let delta = vec![1.0; l];
        let b = vec![1.0; l];
        let inp = ScanInputs {
            batch: 1,
            len: l,
            channels: 1,
            state: 1,
            u,
            delta: &delta,
            a: &[0.5f64.ln()],
            b: &b,
            c: &b,
            d: &[0.0],
        };
        Sequential.run(&inp, None).unwrap()
    }

    #[test]
    fn hand_recurrence() {
        let y = toy(&[1.0, 1.0, 1.0]);
        for (got, want) in y.iter().zip([1.0, 1.5, 1.75]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_input_zero_output() {
        assert!(toy(&[0.0; 5]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blelloch_prefix_sums() {
        let mut lane: Vec<(f64, f64)> = (0..8).map(|i| (1.0, i as f64)).collect();
        blelloch(&mut lane, &mut Vec::new());
        let want = [0.0, 1.0, 3.0, 6.0, 10.0, 15.0, 21.0, 28.0];
        assert_eq!(lane.iter().map(|x| x.1).collect::<Vec<_>>(), want);
    }

    #[test]
    fn non_finite_reports_position() {
        let u = [1.0, f64::NAN, 1.0];
        let delta = [1.0; 3];
        let inp = ScanInputs {
            batch: 1,
            len: 3,
            channels: 1,
            state: 1,
            u: &u,
            delta: &delta,
            a: &[-1.0],
            b: &delta,
            c: &delta,
            d: &[0.0],
        };
        for e in [&Sequential as &dyn SsmEvaluator, &Parallel] {
            match e.run(&inp, None) {
                Err(ZigmaError::NonFinite { position, .. }) => assert_eq!(position, 1),
                other => panic!("expected error, got {other:?}"),
            }
        }
    }

    #[test]
    fn registry_lookup() {
        let r = EvaluatorRegistry::builtin();
        assert_eq!(r.names(), ["parallel", "sequential"]);
        assert!(r.get("bogus").is_err());
    }
}
