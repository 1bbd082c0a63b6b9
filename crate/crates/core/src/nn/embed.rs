use rand::Rng;

use super::layers::{Conv2d, Init, LayerNorm};
use super::layout::{map_to_tokens, tokens_to_map, Grid};
use crate::error::{contract, sizing, Result};
use crate::tensor::{Bound, Conv2dParams, Scalar, Tape, Var};

/// Geometry of a convolutional tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchEmbedConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
}

impl PatchEmbedConfig {
    /// Overlapping windows: patch 7, stride 4 at the stem; patch 3, stride 2 afterwards.
    pub fn overlapped(in_channels: usize, embed_dim: usize, stem: bool) -> Self {
        if stem {
            Self { patch_size: 7, stride: 4, padding: 3, in_channels, embed_dim }
        } else {
            Self { patch_size: 3, stride: 2, padding: 1, in_channels, embed_dim }
        }
    }

    /// Non-overlapping 2×2 patches that halve the resolution.
    pub fn mini(in_channels: usize, embed_dim: usize) -> Self {
        Self { patch_size: 2, stride: 2, padding: 0, in_channels, embed_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.patch_size {
            return contract("PatchEmbedConfig", format!("stride {} must be in 1..={}", self.stride, self.patch_size));
        }
        if self.embed_dim == 0 || self.in_channels == 0 {
            return contract("PatchEmbedConfig", "channel counts must be positive");
        }
        Ok(())
    }
}

/// Strided convolution followed by layer norm over channels.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub cfg: PatchEmbedConfig,
    pub proj: Conv2d,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, cfg: PatchEmbedConfig) -> Result<Self> {
        cfg.validate()?;
        init.scope(name, |s| {
            Ok(Self {
                cfg,
                proj: Conv2d::new(
                    s,
                    "proj",
                    cfg.in_channels,
                    cfg.embed_dim,
                    cfg.patch_size,
                    Conv2dParams::new(cfg.stride, cfg.padding),
                )?,
                norm: LayerNorm::new(s, "norm", cfg.embed_dim)?,
            })
        })
    }

    /// Returns normalized tokens `[N, H/s · W/s, D]` and their grid.
    pub fn tokens<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<(Var, Grid)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return contract(
                "patch_embed",
                format!("expected [N,{},H,W], got {s:?}", self.cfg.in_channels),
            );
        }
        for (name, d) in [("height", s[2]), ("width", s[3])] {
            if d % self.cfg.stride != 0 {
                return sizing("patch_embed", format!("{name} {d} is not divisible by stride {}", self.cfg.stride));
            }
        }
        let y = self.proj.forward(tape, p, x)?;
        let (tokens, grid) = map_to_tokens(tape, y)?;
        debug_assert_eq!((grid.height, grid.width), (s[2] / self.cfg.stride, s[3] / self.cfg.stride));
        let tokens = self.norm.forward(tape, p, tokens)?;
        Ok((tokens, grid))
    }

    /// Same as [`Self::tokens`] but folded back to `[N, D, H/s, W/s]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let (tokens, grid) = self.tokens(tape, p, x)?;
        tokens_to_map(tape, tokens, grid)
    }
}
