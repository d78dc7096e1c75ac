//! The ZigMa network.

use std::sync::Arc;

use diffkit::{Bound, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::AttentionLayer;
use super::config::{Conditioning, ModelConfig, PosEmbed};
use super::embed::{patchify, sincos_2d, timestep_features, unpatchify};
use crate::error::{Result, ZigmaError};
use crate::init;
use crate::scan::{self, LayerOrders, Permutation, ScanFamily, ScanScheme};
use crate::ssm::{MambaLayer, SsmEvaluator};

/// How per-layer orders are applied around each sequence model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IndexMode {
    /// Arrange before and rearrange after every layer: two gathers per layer.
    Naive,
    /// Keep the stream in the previous layer's order and apply one fused
    /// gather per layer plus a final restore.
    #[default]
    DoubleIndexed,
}

/// Affine modulation `x · (1 + scale) + shift` driven by an embedding.
#[derive(Debug, Clone, Copy)]
struct AdaLn {
    w: ParamId,
    b: ParamId,
}

impl AdaLn {
    /// Zero-initialised so the modulation starts as the identity.
    fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        AdaLn {
            w: store.add(format!("{prefix}.w"), Tensor::zeros(&[d, 2 * d])),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[2 * d])),
        }
    }

    /// `(m, n)` as `[B, d]` each, with `m = 1 + scale`.
    fn params<'t>(&self, p: &Bound<'t>, emb: Var<'t>, d: usize) -> Result<(Var<'t>, Var<'t>)> {
        let mn = emb.silu().linear(p.var(self.w), Some(p.var(self.b)))?;
        Ok((mn.slice_last(0, d)?.add_scalar(1.0), mn.slice_last(d, 2 * d)?))
    }

    fn apply<'t>(&self, p: &Bound<'t>, emb: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let (m, n) = self.params(p, emb, d)?;
        let m = m.repeat_rows(l)?.reshape(&[b, l, d])?;
        let n = n.repeat_rows(l)?.reshape(&[b, l, d])?;
        Ok(x.mul(m)?.add(n)?)
    }
}

#[derive(Clone)]
struct Block {
    mamba: MambaLayer,
    ada: AdaLn,
    cross: Option<(AttentionLayer, AdaLn)>,
}

#[derive(Clone)]
pub struct ZigMa {
    pub cfg: ModelConfig,
    x_embed: (ParamId, ParamId),
    t_mlp: [ParamId; 4],
    pos: Option<ParamId>,
    pos_fixed: Option<Tensor>,
    classes: Option<ParamId>,
    blocks: Vec<Block>,
    final_ada: AdaLn,
    final_lin: (ParamId, ParamId),
    orders: LayerOrders,
}

fn bld(b: usize, l: usize, d: usize, shape: &[usize]) -> Result<()> {
    if shape != [b, l, d] {
        return Err(ZigmaError::Config(format!("expected [{b}, {l}, {d}], got {shape:?}")));
    }
    Ok(())
}

impl ZigMa {
    /// Builds the network with parameters drawn from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(ZigMa, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ZigMa::new(cfg, &mut store, &mut rng)?;
        Ok((model, store))
    }

    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<ZigMa> {
        cfg.validate()?;
        let d = cfg.hidden;
        let pd = cfg.patch_dim();
        let tf = cfg.t_freq_dim();
        let x_embed = (
            store.add("x_embed.w", init::linear(rng, pd, d)),
            store.add("x_embed.b", Tensor::zeros(&[d])),
        );
        let t_mlp = [
            store.add("t_embed.w1", init::normal(rng, &[tf, d], 0.02)),
            store.add("t_embed.b1", Tensor::zeros(&[d])),
            store.add("t_embed.w2", init::normal(rng, &[d, d], 0.02)),
            store.add("t_embed.b2", Tensor::zeros(&[d])),
        ];
        let m = cfg.tokens();
        let (pos, pos_fixed) = match cfg.pos_embed {
            PosEmbed::None => (None, None),
            PosEmbed::Sinusoidal => (None, Some(sincos_2d(cfg.width / cfg.patch_size, cfg.height / cfg.patch_size, d))),
            PosEmbed::Learnable => (Some(store.add("pos_embed", init::normal(rng, &[m, d], 0.02))), None),
        };
        let classes = (cfg.conditioning != Conditioning::None)
            .then(|| store.add("class_embed", init::normal(rng, &[cfg.n_classes, cfg.cond_tokens * d], 1.0)));
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let prefix = format!("blocks.{i}");
            let mamba = MambaLayer::new(store, &format!("{prefix}.mamba"), cfg.mamba(), rng)?;
            let ada = AdaLn::new(store, &format!("{prefix}.ada"), d);
            let cross = if cfg.conditioning == Conditioning::CrossAttention {
                let att = AttentionLayer::new(store, &format!("{prefix}.xattn"), d, cfg.heads, rng)?;
                Some((att, AdaLn::new(store, &format!("{prefix}.ada_c"), d)))
            } else {
                None
            };
            blocks.push(Block { mamba, ada, cross });
        }
        let final_ada = AdaLn::new(store, "final.ada", d);
        let final_lin = (
            store.add("final.w", Tensor::zeros(&[d, pd])),
            store.add("final.b", Tensor::zeros(&[pd])),
        );
        let orders = LayerOrders::new(Self::layer_orders(cfg)?)?;
        Ok(ZigMa {
            cfg: cfg.clone(),
            x_embed,
            t_mlp,
            pos,
            pos_fixed,
            classes,
            blocks,
            final_ada,
            final_lin,
            orders,
        })
    }

    /// Per-layer token orders, extended with a fixed prefix for in-context
    /// condition tokens.
    pub fn layer_orders(cfg: &ModelConfig) -> Result<Vec<Permutation>> {
        let family = ScanFamily::from_name(&cfg.scan).ok_or_else(|| ZigmaError::Config(format!("unknown scan `{}`", cfg.scan)))?;
        let prefix = if cfg.conditioning == Conditioning::InContext { cfg.cond_tokens } else { 0 };
        (0..cfg.layers)
            .map(|i| {
                let mut scheme = scan::scheme_for_layer(i, cfg.orf, cfg.grid())?;
                scheme = ScanScheme {
                    family,
                    variant: if family == ScanFamily::Sweep { 0 } else { scheme.variant },
                    ..scheme
                };
                Ok(scan::generate(&scheme)?.with_fixed_prefix(prefix))
            })
            .collect()
    }

    pub fn orders(&self) -> &LayerOrders {
        &self.orders
    }

    pub fn with_evaluator(mut self, evaluator: Arc<dyn SsmEvaluator>) -> Self {
        for b in &mut self.blocks {
            b.mamba = b.mamba.clone().with_evaluator(evaluator.clone());
        }
        self
    }

    /// Timestep embedding `[B, d]`.
    pub fn t_embed<'t>(&self, p: &Bound<'t>, tape_t: Var<'t>) -> Result<Var<'t>> {
        let [w1, b1, w2, b2] = self.t_mlp.map(|id| p.var(id));
        Ok(tape_t.linear(w1, Some(b1))?.silu().linear(w2, Some(b2))?)
    }

    /// Block `layer`'s `(m, n)` for timesteps `t`, each `[B, d]`.
    pub fn modulation<'t>(&self, p: &Bound<'t>, layer: usize, t: &[f64]) -> Result<(Var<'t>, Var<'t>)> {
        let tape = p.var(self.x_embed.0).tape();
        let emb = self.t_embed(p, tape.constant(timestep_features(t, self.cfg.t_freq_dim())))?;
        self.blocks[layer].ada.params(p, emb, self.cfg.hidden)
    }

    /// Condition tokens `[B, cond_tokens, d]` for class labels.
    fn condition<'t>(&self, p: &Bound<'t>, labels: Option<&[usize]>, batch: usize) -> Result<Option<Var<'t>>> {
        let Some(table) = self.classes else { return Ok(None) };
        let labels = labels.ok_or_else(|| ZigmaError::Config("conditioned model needs class labels".into()))?;
        if labels.len() != batch {
            return Err(ZigmaError::Config(format!("{} labels for batch of {batch}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= self.cfg.n_classes) {
            return Err(ZigmaError::Config(format!("class {bad} out of range 0..{}", self.cfg.n_classes)));
        }
        let c = p.var(table).gather_rows(labels)?;
        Ok(Some(c.reshape(&[batch, self.cfg.cond_tokens, self.cfg.hidden])?))
    }

    /// Velocity prediction for `x_t: [B, C, H, W]` at times `t` (one per batch element).
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, t: &[f64], labels: Option<&[usize]>) -> Result<Var<'t>> {
        self.forward_with(p, x, t, labels, IndexMode::DoubleIndexed)
    }

    pub fn forward_with<'t>(&self, p: &Bound<'t>, x: Var<'t>, t: &[f64], labels: Option<&[usize]>, mode: IndexMode) -> Result<Var<'t>> {
        let cfg = &self.cfg;
        let shape = x.shape();
        let want = [cfg.channels, cfg.height, cfg.width];
        if shape.len() != 4 || shape[1..] != want {
            return Err(ZigmaError::Config(format!("input {shape:?} does not match [B, {want:?}]")));
        }
        let (b, d, m) = (shape[0], cfg.hidden, cfg.tokens());
        if t.len() != b {
            return Err(ZigmaError::Config(format!("{} timesteps for batch of {b}", t.len())));
        }
        if let Some(i) = t.iter().position(|v| !v.is_finite()) {
            return Err(ZigmaError::NonFinite {
                context: "timesteps",
                position: i,
            });
        }
        let tape = x.tape();
        let mut h = patchify(x, cfg.patch_size)?.linear(p.var(self.x_embed.0), Some(p.var(self.x_embed.1)))?;
        let pos = match (&self.pos, &self.pos_fixed) {
            (Some(id), _) => Some(p.var(*id)),
            (None, Some(fixed)) => Some(tape.constant(fixed.clone())),
            _ => None,
        };
        if let Some(pos) = pos {
            h = h.add(pos.reshape(&[1, m * d])?.repeat_rows(b)?.reshape(&[b, m, d])?)?;
        }
        let temb = self.t_embed(p, tape.constant(timestep_features(t, cfg.t_freq_dim())))?;
        let cond = self.condition(p, labels, b)?;
        let cemb = match &cond {
            Some(c) if cfg.conditioning == Conditioning::CrossAttention => Some(c.mean_middle()?),
            _ => None,
        };

        let prefix = if cfg.conditioning == Conditioning::InContext { cfg.cond_tokens } else { 0 };
        if let Some(c) = cond.filter(|_| prefix > 0) {
            h = prepend(c, h)?;
        }
        let len = m + prefix;
        bld(b, len, d, &h.shape())?;

        for (i, block) in self.blocks.iter().enumerate() {
            match mode {
                IndexMode::Naive => {
                    let order = self.orders.layer(i);
                    let arranged = order.apply_var(h)?;
                    let y = block.mamba.forward(p, block.ada.apply(p, temb, arranged)?)?;
                    h = order.inverse().apply_var(y)?.add(h)?;
                }
                IndexMode::DoubleIndexed => {
                    h = self.orders.fused(i).apply_var(h)?;
                    h = block.mamba.forward(p, block.ada.apply(p, temb, h)?)?.add(h)?;
                }
            }
            if let (Some((att, ada_c)), Some(cemb), Some(c)) = (&block.cross, cemb, cond) {
                h = att.forward(p, ada_c.apply(p, cemb, h)?, c)?.add(h)?;
            }
        }
        if mode == IndexMode::DoubleIndexed {
            h = self.orders.restore().apply_var(h)?;
        }
        if prefix > 0 {
            h = strip_prefix(h, prefix)?;
        }
        let h = h.layer_norm(None, None, 1e-6)?;
        let h = self.final_ada.apply(p, temb, h)?;
        let out = h.linear(p.var(self.final_lin.0), Some(p.var(self.final_lin.1)))?;
        unpatchify(out, cfg.channels, cfg.height, cfg.width, cfg.patch_size)
    }
}

/// `[B, K, d] ++ [B, M, d] -> [B, K+M, d]`.
pub fn prepend<'t>(c: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let (cs, xs) = (c.shape(), x.shape());
    let (b, k, m, d) = (xs[0], cs[1], xs[1], xs[2]);
    let both = c.reshape(&[b * k, d])?.concat_rows(x.reshape(&[b * m, d])?)?;
    let idx: Vec<usize> = (0..b)
        .flat_map(|bi| (0..k).map(move |j| bi * k + j).chain((0..m).map(move |j| b * k + bi * m + j)))
        .collect();
    Ok(both.gather_rows(&idx)?.reshape(&[b, k + m, d])?)
}

/// Drops the first `k` tokens of `[B, L, d]`.
pub fn strip_prefix(x: Var<'_>, k: usize) -> Result<Var<'_>> {
    let s = x.shape();
    let (b, l, d) = (s[0], s[1], s[2]);
    let idx: Vec<usize> = (0..b).flat_map(|bi| (k..l).map(move |j| bi * l + j)).collect();
    Ok(x.reshape(&[b * l, d])?.gather_rows(&idx)?.reshape(&[b, l - k, d])?)
}
