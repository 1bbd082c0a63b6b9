use rand::Rng;

use super::config::ModelConfig;
use crate::error::{contract, sizing, Result};
use crate::nn::{
    map_to_tokens, tokens_to_map, AttentionConfig, Conv2d, DeformKernel, FeedForward, Grid, Init,
    MultiHeadAttention, OffsetEstimator, PatchEmbed, PatchEmbedConfig, PatchHarmonization, ResidualBlock,
    TransformerBlock, UpsampleConv,
};
use crate::tensor::{Bound, ParamStore, Scalar, Tape, Var};

/// Patch alignment (offset estimation + deformable convolution) followed by harmonization.
#[derive(Clone, Debug)]
pub struct RefPa {
    pub offsets: OffsetEstimator,
    pub deform: DeformKernel,
    pub harmonize: PatchHarmonization,
}

/// Intermediate products of [`RefPa::forward`].
pub struct RefPaOutput {
    pub offsets: Var,
    pub coarse: Var,
    pub aligned: Var,
}

impl RefPa {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, channels: usize, kernel: usize) -> Result<Self> {
        init.scope("ref_pa", |s| {
            Ok(Self {
                offsets: OffsetEstimator::new(s, "offset", channels, kernel)?,
                deform: DeformKernel::new(s, "deform", channels, channels, kernel)?,
                harmonize: PatchHarmonization::new(s, "harmonize", channels)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, input: Var, reference: Var) -> Result<RefPaOutput> {
        let offsets = self.offsets.forward(tape, p, input, reference)?;
        let coarse = self.deform.forward(tape, p, reference, offsets)?;
        let aligned = self.harmonize.forward(tape, p, input, coarse)?;
        Ok(RefPaOutput { offsets, coarse, aligned })
    }
}

/// Reference attention at half resolution, upsampled back for fusion.
#[derive(Clone, Debug)]
pub struct RefPt {
    pub mini_aligned: PatchEmbed,
    pub mini_reference: PatchEmbed,
    pub attention: MultiHeadAttention,
    pub ffn: FeedForward,
    pub up: UpsampleConv,
}

pub struct RefPtOutput {
    pub mini_aligned: Var,
    pub mini_reference: Var,
    /// Refined features at half resolution (tokens).
    pub refined: Var,
    /// Refined features projected back to the stage resolution (map).
    pub features: Var,
}

impl RefPt {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, cfg: AttentionConfig, mlp_ratio: usize) -> Result<Self> {
        let d = cfg.embed_dim;
        init.scope("ref_pt", |s| {
            Ok(Self {
                mini_aligned: PatchEmbed::new(s, "mpe_ga", PatchEmbedConfig::mini(d, d))?,
                mini_reference: PatchEmbed::new(s, "mpe_ref", PatchEmbedConfig::mini(d, d))?,
                attention: MultiHeadAttention::new(s, "ra", cfg)?,
                ffn: FeedForward::new(s, "ffn", d, mlp_ratio)?,
                up: UpsampleConv::new(s, "up", d, d)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, aligned: Var, reference: Var) -> Result<RefPtOutput> {
        let (mga, grid) = self.mini_aligned.tokens(tape, p, aligned)?;
        let (mref, ref_grid) = self.mini_reference.tokens(tape, p, reference)?;
        let ra = self.attention.reference_attention(tape, p, mga, mref, ref_grid)?;
        let x = tape.add(ra, mga)?;
        let refined = self.ffn.forward(tape, p, x)?;
        let map = tokens_to_map(tape, refined, grid)?;
        let features = self.up.forward(tape, p, map)?;
        Ok(RefPtOutput { mini_aligned: mga, mini_reference: mref, refined, features })
    }
}

/// One encoder stage.
#[derive(Clone, Debug)]
pub struct Stage {
    pub input_embed: PatchEmbed,
    pub reference_embed: Option<PatchEmbed>,
    pub main_pt: Vec<TransformerBlock>,
    pub ref_pa: Option<RefPa>,
    pub ref_pt: Option<RefPt>,
}

/// Every intermediate of one encoder stage; reference members are `None`
/// where the stage or variant does not embed the reference.
#[derive(Clone, Debug, Default)]
pub struct EncoderScaleState {
    pub p_in: Option<Var>,
    pub p_ref: Option<Var>,
    pub offsets: Option<Var>,
    pub p_ca: Option<Var>,
    pub p_ga: Option<Var>,
    pub p_mga: Option<Var>,
    pub p_mref: Option<Var>,
    pub f_main: Option<Var>,
    pub f_ref: Option<Var>,
    pub output: Option<Var>,
}

pub struct EncoderOutput {
    /// Fused stage outputs `[N, C_s, H/2^(s+2), W/2^(s+2)]`.
    pub features: Vec<Var>,
    pub states: Vec<EncoderScaleState>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub block: TransformerBlock,
    pub up: [UpsampleConv; 5],
    pub fuse_eighth: Conv2d,
    pub fuse_quarter: Conv2d,
    pub res: [ResidualBlock; 4],
    pub head: Conv2d,
}

pub struct InpaintOutput {
    /// `I ⊙ (1 − M)`.
    pub masked_input: Var,
    /// Raw network output in [−1, 1].
    pub generated: Var,
    /// `I_m + Î ⊙ M`.
    pub composite: Var,
}

/// The reference-guided inpainting network.
#[derive(Clone, Debug)]
pub struct InpaintNet {
    pub cfg: ModelConfig,
    pub stages: Vec<Stage>,
    pub decoder: Decoder,
}

impl InpaintNet {
    pub fn new<T: Scalar, R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(store, rng);
        let dims = &cfg.embed_dims;
        let variant = cfg.variant;
        let mut stages = Vec::with_capacity(dims.len());
        for (s, &d) in dims.iter().enumerate() {
            let stage = init.scope(&format!("enc.s{s}"), |init| {
                let stem = s == 0;
                let in_ch = if stem { 4 } else { dims[s - 1] };
                let input_embed = PatchEmbed::new(init, "embed_in", PatchEmbedConfig::overlapped(in_ch, d, stem))?;
                let attn = AttentionConfig { embed_dim: d, num_heads: cfg.num_heads[s], spatial_reduction_ratio: cfg.sr_ratios[s] };
                let main_pt = (0..cfg.main_pt_depths[s])
                    .map(|b| TransformerBlock::new(init, &format!("main_pt.{b}"), attn, cfg.mlp_ratio))
                    .collect::<Result<Vec<_>>>()?;
                let with_ref = variant.uses_reference() && s < cfg.ref_scales;
                let (reference_embed, ref_pa, ref_pt) = if with_ref {
                    let ref_in = if stem { 3 } else { dims[s - 1] };
                    let re = PatchEmbed::new(init, "embed_ref", PatchEmbedConfig::overlapped(ref_in, d, stem))?;
                    let pa = RefPa::new(init, d, cfg.deform_kernel)?;
                    let pt = if variant.uses_ref_pt() {
                        let ra = AttentionConfig {
                            embed_dim: d,
                            num_heads: cfg.num_heads[s],
                            spatial_reduction_ratio: cfg.ref_sr_ratios[s],
                        };
                        Some(RefPt::new(init, ra, cfg.mlp_ratio)?)
                    } else {
                        None
                    };
                    (Some(re), Some(pa), pt)
                } else {
                    (None, None, None)
                };
                Ok(Stage { input_embed, reference_embed, main_pt, ref_pa, ref_pt })
            })?;
            stages.push(stage);
        }
        let decoder = init.scope("dec", |init| {
            let deep = *dims.last().unwrap();
            let dd = cfg.decoder_dim;
            let [t0, t1, t2] = [cfg.tail_dims[0], cfg.tail_dims[1], cfg.tail_dims[2]];
            let attn = AttentionConfig { embed_dim: deep, num_heads: cfg.decoder_heads, spatial_reduction_ratio: 1 };
            Ok(Decoder {
                block: TransformerBlock::new(init, "block", attn, cfg.mlp_ratio)?,
                up: [
                    UpsampleConv::new(init, "up0", deep, dd)?,
                    UpsampleConv::new(init, "up1", dd, dd)?,
                    UpsampleConv::new(init, "up2", dd, t0)?,
                    UpsampleConv::new(init, "up3", t0, t1)?,
                    UpsampleConv::new(init, "up4", t1, t2)?,
                ],
                fuse_eighth: Conv2d::same(init, "fuse8", dd + dims[1], dd, 1)?,
                fuse_quarter: Conv2d::same(init, "fuse4", t0 + dims[0], t0, 1)?,
                res: [
                    ResidualBlock::new(init, "res0", dd)?,
                    ResidualBlock::new(init, "res1", t0)?,
                    ResidualBlock::new(init, "res2", t1)?,
                    ResidualBlock::new(init, "res3", t2)?,
                ],
                head: Conv2d::same(init, "head", t2, 3, 3)?,
            })
        })?;
        Ok(Self { cfg: cfg.clone(), stages, decoder })
    }

    /// Resolution granularity of the network: inputs must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        32
    }

    fn check_inputs<T: Scalar>(&self, tape: &Tape<T>, masked: Var, mask: Var, reference: Var) -> Result<()> {
        let (si, sm, sr) = (tape.shape(masked), tape.shape(mask), tape.shape(reference));
        if si.len() != 4 || si[1] != 3 || sm != [si[0], 1, si[2], si[3]] || sr != si {
            return contract(
                "encode",
                format!("expected image/reference [N,3,H,W] and mask [N,1,H,W], got {si:?}, {sm:?}, {sr:?}"),
            );
        }
        let m = self.size_multiple();
        for (name, d) in [("height", si[2]), ("width", si[3])] {
            if d % m != 0 {
                return sizing("encode", format!("{name} {d} is not a multiple of {m}"));
            }
        }
        Ok(())
    }

    /// Encodes the masked image, mask and reference into four fused stage features.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        masked: Var,
        mask: Var,
        reference: Var,
    ) -> Result<EncoderOutput> {
        self.check_inputs(tape, masked, mask, reference)?;
        let mut x = tape.concat(&[masked, mask], 1)?;
        let mut r = reference;
        let mut features = Vec::with_capacity(self.stages.len());
        let mut states = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut st = EncoderScaleState::default();
            let (tokens, grid) = stage.input_embed.tokens(tape, p, x)?;
            st.p_in = Some(tokens);
            let mut h = tokens;
            for block in &stage.main_pt {
                h = block.forward(tape, p, h, grid)?;
            }
            let f_main = tokens_to_map(tape, h, grid)?;
            st.f_main = Some(f_main);
            let out = match (&stage.reference_embed, &stage.ref_pa) {
                (Some(re), Some(pa)) => {
                    let p_ref = re.forward(tape, p, r)?;
                    r = p_ref;
                    let p_in = tokens_to_map(tape, tokens, grid)?;
                    let pa_out = pa.forward(tape, p, p_in, p_ref)?;
                    st.p_ref = Some(p_ref);
                    st.offsets = Some(pa_out.offsets);
                    st.p_ca = Some(pa_out.coarse);
                    st.p_ga = Some(pa_out.aligned);
                    let f_ref = match &stage.ref_pt {
                        Some(pt) => {
                            let pt_out = pt.forward(tape, p, pa_out.aligned, p_ref)?;
                            st.p_mga = Some(pt_out.mini_aligned);
                            st.p_mref = Some(pt_out.mini_reference);
                            pt_out.features
                        }
                        None => pa_out.aligned,
                    };
                    st.f_ref = Some(f_ref);
                    tape.add(f_main, f_ref)?
                }
                _ => f_main,
            };
            st.output = Some(out);
            features.push(out);
            states.push(st);
            x = out;
        }
        Ok(EncoderOutput { features, states })
    }

    /// Decodes four stage features into an RGB image in [−1, 1].
    pub fn decode<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, features: &[Var]) -> Result<Var> {
        if features.len() != 4 {
            return contract("decode", format!("expected 4 stage features, got {}", features.len()));
        }
        let d = &self.decoder;
        let (tokens, grid): (Var, Grid) = map_to_tokens(tape, features[3])?;
        let tokens = d.block.forward(tape, p, tokens, grid)?;
        let x = tokens_to_map(tape, tokens, grid)?;
        let x = d.up[0].forward(tape, p, x)?;
        let x = d.up[1].forward(tape, p, x)?;
        let x = tape.concat(&[x, features[1]], 1)?;
        let x = d.fuse_eighth.forward(tape, p, x)?;
        let x = d.res[0].forward(tape, p, x)?;
        let x = d.up[2].forward(tape, p, x)?;
        let x = tape.concat(&[x, features[0]], 1)?;
        let x = d.fuse_quarter.forward(tape, p, x)?;
        let x = d.res[1].forward(tape, p, x)?;
        let x = d.up[3].forward(tape, p, x)?;
        let x = d.res[2].forward(tape, p, x)?;
        let x = d.up[4].forward(tape, p, x)?;
        let x = d.res[3].forward(tape, p, x)?;
        let x = d.head.forward(tape, p, x)?;
        Ok(tape.tanh(x))
    }

    /// Masks `image`, runs the network and composites known pixels back in.
    pub fn inpaint<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        image: Var,
        mask: Var,
        reference: Var,
    ) -> Result<InpaintOutput> {
        let s = tape.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 || tape.shape(mask) != [s[0], 1, s[2], s[3]] {
            return contract(
                "inpaint",
                format!("image {s:?} and mask {:?} are incompatible", tape.shape(mask)),
            );
        }
        let mask3 = tape.concat(&[mask, mask, mask], 1)?;
        let keep = tape.scale(mask3, -T::one());
        let keep = tape.add_scalar(keep, T::one());
        let masked_input = tape.mul(image, keep)?;
        let enc = self.encode(tape, p, masked_input, mask, reference)?;
        let generated = self.decode(tape, p, &enc.features)?;
        let fill = tape.mul(generated, mask3)?;
        let composite = tape.add(masked_input, fill)?;
        Ok(InpaintOutput { masked_input, generated, composite })
    }
}
