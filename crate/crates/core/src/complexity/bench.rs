//! Micro-benchmarks of single blocks at batch 1: median wall time and the
//! tensor-allocation high-water mark from diffkit's accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use diffkit::memory::{self, BudgetExceeded};
use diffkit::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZigmaError};
use crate::init;
use crate::model::AttentionLayer;
use crate::scan::{self, GridDims, LayerOrders, Permutation, ScanFamily, ScanScheme};
use crate::ssm::{MambaConfig, MambaLayer};

/// One grid point of a benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub kind: String,
    pub tokens: usize,
    pub d: usize,
    pub n: usize,
    /// Scan directions per block (`kmamba`).
    pub k: usize,
    /// Stacked layers (`zigzag`).
    pub layers: usize,
    /// Scan family of the stacked layers (`zigzag`).
    pub scan: String,
    pub orf: usize,
}

impl BenchPoint {
    pub fn new(kind: &str, tokens: usize, d: usize) -> Self {
        BenchPoint {
            kind: kind.to_string(),
            tokens,
            d,
            n: 16,
            k: 1,
            layers: 1,
            scan: "zigzag".into(),
            orf: 1,
        }
    }

    /// The most nearly square `w × h` grid holding exactly `tokens` cells.
    pub fn grid(&self) -> GridDims {
        let mut h = (self.tokens as f64).sqrt() as usize;
        while h > 1 && self.tokens % h != 0 {
            h -= 1;
        }
        let h = h.max(1);
        GridDims::plane(self.tokens / h, h)
    }
}

/// A constructed layer ready to be timed.
pub trait BenchInstance {
    fn param_count(&self) -> usize;
    fn forward(&self) -> Result<()>;
}

pub trait BenchLayer: Send + Sync {
    fn name(&self) -> &'static str;
    fn build(&self, point: &BenchPoint, seed: u64) -> Result<Box<dyn BenchInstance>>;
}

fn input(point: &BenchPoint, rng: &mut ChaCha8Rng) -> Tensor {
    init::normal(rng, &[1, point.tokens, point.d], 1.0)
}

struct Attention {
    store: ParamStore,
    layer: AttentionLayer,
    x: Tensor,
}

impl BenchInstance for Attention {
    fn param_count(&self) -> usize {
        self.store.numel()
    }

    fn forward(&self) -> Result<()> {
        let tape = Tape::no_grad();
        let p = self.store.bind(&tape);
        let x = tape.constant(self.x.clone());
        self.layer.forward(&p, x, x)?;
        Ok(())
    }
}

/// Single-head self-attention with Q/K/V/O projections.
pub struct AttentionBench;

impl BenchLayer for AttentionBench {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn build(&self, point: &BenchPoint, seed: u64) -> Result<Box<dyn BenchInstance>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "attn", point.d, 1, &mut rng)?;
        let x = input(point, &mut rng);
        Ok(Box::new(Attention { store, layer, x }))
    }
}

/// `layers.len()` Mamba layers, each applied under its own token order.
/// `parallel` sums the directions of one block; otherwise the layers are
/// stacked residually with double-indexed order changes.
struct Ssm {
    store: ParamStore,
    layers: Vec<MambaLayer>,
    orders: Option<LayerOrders>,
    parallel: bool,
    x: Tensor,
}

impl BenchInstance for Ssm {
    fn param_count(&self) -> usize {
        self.store.numel()
    }

    fn forward(&self) -> Result<()> {
        let tape = Tape::no_grad();
        let p = self.store.bind(&tape);
        let x = tape.constant(self.x.clone());
        match (&self.orders, self.parallel) {
            (None, _) => {
                let mut h = x;
                for layer in &self.layers {
                    h = layer.forward(&p, h)?.add(h)?;
                }
            }
            (Some(orders), true) => {
                let mut acc = None;
                for (i, layer) in self.layers.iter().enumerate() {
                    let perm = orders.layer(i);
                    let y = perm.inverse().apply_var(layer.forward(&p, perm.apply_var(x)?)?)?;
                    acc = Some(match acc {
                        None => y,
                        Some(a) => y.add(a)?,
                    });
                }
            }
            (Some(orders), false) => {
                let mut h = x;
                for (i, layer) in self.layers.iter().enumerate() {
                    let g = orders.fused(i).apply_var(h)?;
                    h = layer.forward(&p, g)?.add(g)?;
                }
                orders.restore().apply_var(h)?;
            }
        }
        Ok(())
    }
}

fn ssm_instance(point: &BenchPoint, count: usize, orders: Option<Vec<Permutation>>, parallel: bool, seed: u64) -> Result<Box<dyn BenchInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = MambaConfig {
        d_state: point.n,
        ..MambaConfig::new(point.d)
    };
    let layers = (0..count)
        .map(|i| MambaLayer::new(&mut store, &format!("mamba.{i}"), cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let orders = orders.map(LayerOrders::new).transpose()?;
    let x = input(point, &mut rng);
    Ok(Box::new(Ssm {
        store,
        layers,
        orders,
        parallel,
        x,
    }))
}

/// One Mamba layer over the raw token sequence.
pub struct MambaBench;

impl BenchLayer for MambaBench {
    fn name(&self) -> &'static str {
        "mamba"
    }

    fn build(&self, point: &BenchPoint, seed: u64) -> Result<Box<dyn BenchInstance>> {
        ssm_instance(point, 1, None, false, seed)
    }
}

/// A block scanning `k` zigzag directions, one Mamba layer each.
pub struct KMambaBench;

impl BenchLayer for KMambaBench {
    fn name(&self) -> &'static str {
        "kmamba"
    }

    fn build(&self, point: &BenchPoint, seed: u64) -> Result<Box<dyn BenchInstance>> {
        if !(1..=8).contains(&point.k) {
            return Err(ZigmaError::Config(format!("kmamba needs 1..=8 directions, got {}", point.k)));
        }
        let dims = point.grid();
        let orders = (0..point.k)
            .map(|v| Ok(scan::generate(&ScanScheme::new(ScanFamily::Zigzag, v, dims))?))
            .collect::<Result<Vec<_>>>()?;
        ssm_instance(point, point.k, Some(orders), true, seed)
    }
}

/// A residual stack of Mamba layers whose scan orders cycle through `orf`
/// variants of `scan`, applied with fused gathers.
pub struct ZigzagBench;

impl BenchLayer for ZigzagBench {
    fn name(&self) -> &'static str {
        "zigzag"
    }

    fn build(&self, point: &BenchPoint, seed: u64) -> Result<Box<dyn BenchInstance>> {
        let family = ScanFamily::from_name(&point.scan).ok_or_else(|| ZigmaError::Config(format!("unknown scan `{}`", point.scan)))?;
        let dims = point.grid();
        let orders = (0..point.layers.max(1))
            .map(|i| {
                let s = scan::scheme_for_layer(i, point.orf, dims)?;
                let variant = if family == ScanFamily::Sweep { 0 } else { s.variant };
                Ok(scan::generate(&ScanScheme::new(family, variant, dims))?)
            })
            .collect::<Result<Vec<_>>>()?;
        ssm_instance(point, orders.len(), Some(orders), false, seed)
    }
}

#[derive(Clone)]
pub struct BenchRegistry {
    entries: BTreeMap<&'static str, Arc<dyn BenchLayer>>,
}

impl BenchRegistry {
    pub fn builtin() -> Self {
        let mut r = BenchRegistry { entries: BTreeMap::new() };
        r.register(Arc::new(AttentionBench));
        r.register(Arc::new(MambaBench));
        r.register(Arc::new(KMambaBench));
        r.register(Arc::new(ZigzagBench));
        r
    }

    pub fn register(&mut self, layer: Arc<dyn BenchLayer>) {
        self.entries.insert(layer.name(), layer);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn BenchLayer>> {
        self.entries.get(name).cloned().ok_or_else(|| ZigmaError::UnknownStrategy {
            kind: "bench layer",
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }
}

/// One measured grid point. `None` timings mean the point ran out of budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kind: String,
    pub tokens: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub k: usize,
    pub wall_ms_median: Option<f64>,
    pub peak_bytes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchMeta {
    pub reps: usize,
    pub threads: usize,
    pub memory_limit: Option<usize>,
    pub layers: usize,
    pub scan: String,
    pub orf: usize,
    /// Parameter count per row, in row order.
    pub param_counts: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub meta: BenchMeta,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,tokens,D,N,k,wall_ms_median,peak_bytes\n");
        for r in &self.rows {
            let ms = r.wall_ms_median.map(|v| format!("{v:.6}")).unwrap_or_default();
            let peak = r.peak_bytes.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.kind, r.tokens, r.d, r.n, r.k, ms, peak);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Measured {
    params: usize,
    ms: f64,
    peak: usize,
}

fn measure(layer: &dyn BenchLayer, point: &BenchPoint, reps: usize, limit: Option<usize>) -> Result<Option<Measured>> {
    let base = memory::live_bytes();
    memory::reset_peak();
    memory::set_limit(limit.map(|l| base + l));
    let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<Measured> {
        let inst = layer.build(point, 0)?;
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            inst.forward()?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        Ok(Measured {
            params: inst.param_count(),
            ms: median(times),
            peak: memory::peak_bytes() - base,
        })
    }));
    memory::set_limit(None);
    match outcome {
        Ok(r) => r.map(Some),
        Err(payload) if payload.is::<BudgetExceeded>() => Ok(None),
        Err(payload) => std::panic::resume_unwind(payload),
    }
}

/// Runs every point with `reps` timed forwards (median reported). A point
/// whose allocations exceed `memory_limit` bytes is recorded with empty
/// measurements and the run continues.
pub fn bench(points: &[BenchPoint], reps: usize, memory_limit: Option<usize>) -> Result<BenchReport> {
    if reps == 0 {
        return Err(ZigmaError::Config("reps must be at least 1".into()));
    }
    let registry = BenchRegistry::builtin();
    let mut rows = Vec::with_capacity(points.len());
    let mut params = Vec::with_capacity(points.len());
    for point in points {
        let layer = registry.get(&point.kind)?;
        let m = measure(layer.as_ref(), point, reps, memory_limit)?;
        params.push(m.as_ref().map(|m| m.params));
        rows.push(BenchRow {
            kind: point.kind.clone(),
            tokens: point.tokens,
            d: point.d,
            n: point.n,
            k: point.k,
            wall_ms_median: m.as_ref().map(|m| m.ms),
            peak_bytes: m.as_ref().map(|m| m.peak),
        });
    }
    let first = points.first();
    Ok(BenchReport {
        meta: BenchMeta {
            reps,
            threads: 1,
            memory_limit,
            layers: first.map_or(1, |p| p.layers),
            scan: first.map_or_else(|| "zigzag".into(), |p| p.scan.clone()),
            orf: first.map_or(1, |p| p.orf),
            param_counts: params,
        },
        rows,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}
