//! Multi-head scaled dot-product attention with optional key/value spatial reduction.

use rand::Rng;

use super::layers::{Conv2d, Init, LayerNorm, Linear};
use super::layout::{map_to_tokens, tokens_to_map, Grid};
use crate::error::{contract, sizing, Result};
use crate::tensor::{Bound, Conv2dParams, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub spatial_reduction_ratio: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return contract(
                "AttentionConfig",
                format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.num_heads),
            );
        }
        if self.spatial_reduction_ratio == 0 {
            return contract("AttentionConfig", "spatial_reduction_ratio must be >= 1");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Clone, Debug)]
struct SpatialReduction {
    conv: Conv2d,
    norm: LayerNorm,
    ratio: usize,
}

/// Queries come from one token stream; keys and values from another.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    reduction: Option<SpatialReduction>,
}

/// Output tokens plus the post-softmax weights `[N·heads, Lq, Lk]`.
pub struct AttentionOutput {
    pub tokens: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, cfg: AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        init.scope(name, |s| {
            let reduction = if cfg.spatial_reduction_ratio > 1 {
                let r = cfg.spatial_reduction_ratio;
                Some(SpatialReduction {
                    conv: Conv2d::new(s, "sr", d, d, r, Conv2dParams::new(r, 0))?,
                    norm: LayerNorm::new(s, "sr_norm", d)?,
                    ratio: r,
                })
            } else {
                None
            };
            Ok(Self {
                cfg,
                query: Linear::new(s, "q", d, d)?,
                key: Linear::new(s, "k", d, d)?,
                value: Linear::new(s, "v", d, d)?,
                out: Linear::new(s, "proj", d, d)?,
                reduction,
            })
        })
    }

    fn reduce<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, kv: Var, grid: Grid) -> Result<Var> {
        let Some(sr) = &self.reduction else { return Ok(kv) };
        for (name, d) in [("height", grid.height), ("width", grid.width)] {
            if d % sr.ratio != 0 {
                return sizing("attention", format!("key/value {name} {d} not divisible by reduction ratio {}", sr.ratio));
            }
        }
        let map = tokens_to_map(tape, kv, grid)?;
        let map = sr.conv.forward(tape, p, map)?;
        let (tokens, _) = map_to_tokens(tape, map)?;
        sr.norm.forward(tape, p, tokens)
    }

    /// `[N, L, D]` → `[N·h, L, dh]`, or the key layout `[N·h, dh, L]` when `keys`.
    fn split_heads<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, keys: bool) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (n, l) = (s[0], s[1]);
        let (h, dh) = (self.cfg.num_heads, self.cfg.head_dim());
        let x = tape.reshape(x, &[n, l, h, dh])?;
        if keys {
            let x = tape.permute(x, &[0, 2, 3, 1])?;
            tape.reshape(x, &[n * h, dh, l])
        } else {
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            tape.reshape(x, &[n * h, l, dh])
        }
    }

    pub fn forward_with_weights<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        q_src: Var,
        kv_src: Var,
        kv_grid: Grid,
    ) -> Result<AttentionOutput> {
        let (qs, ks) = (tape.shape(q_src).to_vec(), tape.shape(kv_src).to_vec());
        let d = self.cfg.embed_dim;
        if qs.len() != 3 || ks.len() != 3 || qs[2] != d || ks[2] != d || qs[0] != ks[0] {
            return contract("multi_head_attention", format!("query {qs:?} / key-value {ks:?} must be [N, L, {d}]"));
        }
        if ks[1] != kv_grid.tokens() {
            return contract("multi_head_attention", format!("{} key/value tokens do not fill the grid {kv_grid:?}", ks[1]));
        }
        let (n, lq) = (qs[0], qs[1]);
        let kv = self.reduce(tape, p, kv_src, kv_grid)?;
        let q = self.query.forward(tape, p, q_src)?;
        let k = self.key.forward(tape, p, kv)?;
        let v = self.value.forward(tape, p, kv)?;
        let q = self.split_heads(tape, q, false)?;
        let k_t = self.split_heads(tape, k, true)?;
        let v = self.split_heads(tape, v, false)?;
        let scores = tape.bmm(q, k_t)?;
        let scale = T::one() / T::from_usize(self.cfg.head_dim()).unwrap().sqrt();
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores, 2)?;
        let mixed = tape.bmm(weights, v)?;
        let mixed = tape.reshape(mixed, &[n, self.cfg.num_heads, lq, self.cfg.head_dim()])?;
        let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = tape.reshape(mixed, &[n, lq, d])?;
        let tokens = self.out.forward(tape, p, mixed)?;
        Ok(AttentionOutput { tokens, weights })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, q_src: Var, kv_src: Var, kv_grid: Grid) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, q_src, kv_src, kv_grid)?.tokens)
    }

    /// Self-attention: queries, keys and values all from `tokens`.
    pub fn self_attention<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var, grid: Grid) -> Result<Var> {
        self.forward(tape, p, tokens, tokens, grid)
    }

    /// Reference attention: queries from the aligned stream, keys and values from the reference stream.
    pub fn reference_attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        aligned: Var,
        reference: Var,
        reference_grid: Grid,
    ) -> Result<Var> {
        self.forward(tape, p, aligned, reference, reference_grid)
    }
}

/// Pre-norm MLP with residual: `x + W₂·gelu(W₁·LN(x))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub expand: Linear,
    pub project: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, dim: usize, hidden_ratio: usize) -> Result<Self> {
        init.scope(name, |s| {
            Ok(Self {
                norm: LayerNorm::new(s, "norm", dim)?,
                expand: Linear::new(s, "fc1", dim, dim * hidden_ratio)?,
                project: Linear::new(s, "fc2", dim * hidden_ratio, dim)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, p, x)?;
        let h = self.expand.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.project.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// `x + SA(LN(x))` followed by a feedforward block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm: LayerNorm,
    pub attention: MultiHeadAttention,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        cfg: AttentionConfig,
        hidden_ratio: usize,
    ) -> Result<Self> {
        init.scope(name, |s| {
            Ok(Self {
                norm: LayerNorm::new(s, "norm", cfg.embed_dim)?,
                attention: MultiHeadAttention::new(s, "attn", cfg)?,
                ffn: FeedForward::new(s, "ffn", cfg.embed_dim, hidden_ratio)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, grid: Grid) -> Result<Var> {
        let h = self.norm.forward(tape, p, x)?;
        let a = self.attention.self_attention(tape, p, h, grid)?;
        let x = tape.add(x, a)?;
        self.ffn.forward(tape, p, x)
    }
}
