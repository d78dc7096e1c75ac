//! The ZigMa network and its building blocks.

mod attention;
mod config;
mod embed;
mod zigma;

pub use attention::{attention, attention_weights, AttentionLayer};
pub use config::{Conditioning, ModelConfig, PosEmbed, PRESETS};
pub use embed::{patch_index, patchify, sincos_2d, timestep_features, unpatchify};
pub use zigma::{prepend, strip_prefix, IndexMode, ZigMa};
