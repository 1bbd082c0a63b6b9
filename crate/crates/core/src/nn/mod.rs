//! Reusable network blocks. Every block stores only [`ParamId`](crate::tensor::ParamId)s;
//! values come from a [`Bound`](crate::tensor::Bound) parameter set at call time.

mod attention;
mod conv_blocks;
mod deform;
mod embed;
mod harmonize;
mod layers;
mod layout;

pub use attention::{AttentionConfig, AttentionOutput, FeedForward, MultiHeadAttention, TransformerBlock};
pub use conv_blocks::{ResidualBlock, UpsampleConv};
pub use deform::{DeformKernel, OffsetEstimator};
pub use embed::{PatchEmbed, PatchEmbedConfig};
pub use harmonize::{HarmonizationOutput, PatchHarmonization};
pub use layers::{Conv2d, Init, LayerNorm, Linear};
pub use layout::{map_to_tokens, tokens_to_map, Grid};
