use serde::{Deserialize, Serialize};

use crate::error::{Result, ZigmaError};
use crate::scan::{GridDims, ScanFamily};
use crate::ssm::MambaConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEmbed {
    None,
    Sinusoidal,
    Learnable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    None,
    CrossAttention,
    InContext,
}

/// Size presets `(layers, hidden)`.
pub const PRESETS: [(&str, usize, usize); 4] = [("S", 12, 384), ("B", 12, 768), ("L", 24, 1024), ("XL", 28, 1152)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Scan family of the per-layer orders: `sweep`, `zigzag` or `hilbert`.
    #[serde(default = "default_scan")]
    pub scan: String,
    /// Number of distinct orders cycled across layers.
    #[serde(default = "default_orf")]
    pub orf: usize,
    #[serde(default = "default_pos")]
    pub pos_embed: PosEmbed,
    #[serde(default = "default_cond")]
    pub conditioning: Conditioning,
    #[serde(default)]
    pub n_classes: usize,
    /// Condition tokens per class label.
    #[serde(default = "one")]
    pub cond_tokens: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_state")]
    pub d_state: usize,
    #[serde(default = "default_expand")]
    pub expand: usize,
    #[serde(default = "default_conv")]
    pub conv_width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

fn default_scan() -> String {
    "zigzag".into()
}
fn default_orf() -> usize {
    8
}
fn default_pos() -> PosEmbed {
    PosEmbed::Learnable
}
fn default_cond() -> Conditioning {
    Conditioning::None
}
fn one() -> usize {
    1
}
fn default_heads() -> usize {
    4
}
fn default_state() -> usize {
    16
}
fn default_expand() -> usize {
    2
}
fn default_conv() -> usize {
    4
}

impl ModelConfig {
    /// A small unconditional model for `channels × height × width` inputs.
    pub fn tiny(layers: usize, hidden: usize, channels: usize, height: usize, width: usize) -> Self {
        ModelConfig {
            layers,
            hidden,
            patch_size: 1,
            channels,
            height,
            width,
            scan: default_scan(),
            orf: default_orf(),
            pos_embed: default_pos(),
            conditioning: default_cond(),
            n_classes: 0,
            cond_tokens: 1,
            heads: default_heads(),
            d_state: default_state(),
            expand: default_expand(),
            conv_width: default_conv(),
            variant: None,
        }
    }

    /// One of the `S`, `B`, `L`, `XL` presets at the given input geometry.
    pub fn preset(label: &str, patch_size: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        let (_, layers, hidden) = PRESETS
            .iter()
            .find(|(l, ..)| *l == label)
            .ok_or_else(|| ZigmaError::UnknownStrategy {
                kind: "model preset",
                name: label.to_string(),
                known: PRESETS.map(|p| p.0).join(", "),
            })?;
        let mut cfg = Self::tiny(*layers, *hidden, channels, height, width);
        cfg.patch_size = patch_size;
        cfg.variant = Some(label.to_string());
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ZigmaError::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.channels == 0 || self.patch_size == 0 {
            return bad(format!("layers, hidden, channels and patch_size must be positive: {self:?}"));
        }
        if self.height == 0 || self.width == 0 || self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return bad(format!(
                "image {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch_size
            ));
        }
        if !(1..=8).contains(&self.orf) {
            return bad(format!("orf must be in 1..=8, got {}", self.orf));
        }
        match ScanFamily::from_name(&self.scan) {
            Some(ScanFamily::Sweep | ScanFamily::Zigzag | ScanFamily::Hilbert) => {}
            _ => return bad(format!("scan must be sweep, zigzag or hilbert, got `{}`", self.scan)),
        }
        if self.conditioning != Conditioning::None && (self.n_classes == 0 || self.cond_tokens == 0) {
            return bad("conditioning needs n_classes >= 1 and cond_tokens >= 1".into());
        }
        if self.conditioning == Conditioning::CrossAttention && (self.heads == 0 || self.hidden % self.heads != 0) {
            return bad(format!("{} heads do not divide hidden {}", self.heads, self.hidden));
        }
        self.mamba().validate()
    }

    pub fn mamba(&self) -> MambaConfig {
        MambaConfig {
            d_model: self.hidden,
            d_state: self.d_state,
            expand: self.expand,
            conv_width: self.conv_width,
        }
    }

    pub fn grid(&self) -> GridDims {
        GridDims::plane(self.width / self.patch_size, self.height / self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Width of the sinusoidal timestep features.
    pub fn t_freq_dim(&self) -> usize {
        ((self.hidden / 4).max(2) + 1) / 2 * 2
    }

    /// Parameter count implied by the layer composition.
    pub fn param_count(&self) -> usize {
        let d = self.hidden;
        let ada = d * 2 * d + 2 * d;
        let mut n = self.patch_dim() * d + d; // patch embedding
        n += self.t_freq_dim() * d + d + d * d + d; // timestep MLP
        if self.pos_embed == PosEmbed::Learnable {
            n += self.tokens() * d;
        }
        if self.conditioning != Conditioning::None {
            n += self.n_classes * self.cond_tokens * d;
        }
        let mut block = self.mamba().param_count() + ada;
        if self.conditioning == Conditioning::CrossAttention {
            block += super::AttentionLayer::param_count(d) + ada;
        }
        n += self.layers * block;
        n + ada + d * self.patch_dim() + self.patch_dim() // final layer
    }
}
