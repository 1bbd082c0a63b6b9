//! Gradient-check catalog shared by the gradient tests and the acceptance runner.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transref::losses::{joint_loss, l1_loss, perceptual_loss, style_loss, ConvPyramid, LossWeights};
use transref::model::{ModelConfig, RefPa, RefPt, InpaintNet};
use transref::nn::{
    map_to_tokens, AttentionConfig, Conv2d, DeformKernel, FeedForward, Grid, Init, LayerNorm, Linear,
    MultiHeadAttention, OffsetEstimator, PatchEmbed, PatchEmbedConfig, PatchHarmonization, ResidualBlock,
    TransformerBlock, UpsampleConv,
};
use transref::tensor::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use transref::tensor::{Bound, Conv2dParams, ParamStore, Tape, Tensor, Var};
use transref::Result;

pub type Forward = Box<dyn Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var>>;

pub struct Setup {
    pub params: ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
    pub forward: Forward,
}

pub struct Case {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> Result<Setup>,
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.5);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

/// Perturbs every parameter in proportion to its scale (zero-initialized ones
/// by a small absolute amount) so no weight or bias sits at a symmetric point.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let t = store.get_mut(id);
        let rms = (t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64).sqrt();
        let scale = if rms > 0.0 { 0.5 * rms } else { 0.05 };
        for v in t.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

fn op(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Result<Setup> {
    Ok(Setup { params: ParamStore::new(), inputs, forward: Box::new(move |t, _, x| f(t, x)) })
}

fn block<B: 'static>(
    inputs: Vec<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
    make: impl FnOnce(&mut Init<'_, f64, ChaCha8Rng>) -> Result<B>,
    f: impl Fn(&B, &mut Tape<f64>, &Bound, &[Var]) -> Result<Var> + 'static,
) -> Result<Setup> {
    let mut params = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let b = make(&mut Init::new(&mut params, &mut init_rng))?;
    jitter(&mut params, rng);
    Ok(Setup { params, inputs, forward: Box::new(move |t, p, x| f(&b, t, p, x)) })
}

fn conv_case(rng: &mut ChaCha8Rng, x: &[usize], w: &[usize], p: Conv2dParams, bias: bool) -> Result<Setup> {
    let mut inputs = vec![randn(x, rng), randn(w, rng)];
    if bias {
        inputs.push(randn(&[w[0]], rng));
    }
    op(inputs, move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), p))
}

fn small_attention(rng: &mut ChaCha8Rng, sr: usize) -> Result<Setup> {
    let cfg = AttentionConfig { embed_dim: 8, num_heads: 2, spatial_reduction_ratio: sr };
    let grid = Grid { height: 4, width: 4 };
    block(vec![randn(&[2, 16, 8], rng)], rng, |i| MultiHeadAttention::new(i, "mha", cfg), move |b, t, p, x| {
        b.self_attention(t, p, x[0], grid)
    })
}

fn extractor() -> ConvPyramid<f64> {
    ConvPyramid::with_widths(&[4, 6, 6], 3).expect("extractor")
}

fn loss_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    vec![randn(&[2, 3, 8, 8], rng), randn(&[2, 3, 8, 8], rng)]
}

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        embed_dims: vec![8, 8, 16, 16],
        num_heads: vec![1, 1, 2, 2],
        sr_ratios: vec![4, 2, 1, 1],
        ref_sr_ratios: vec![2, 1, 1],
        main_pt_depths: vec![1, 1, 1, 1],
        decoder_heads: 2,
        decoder_dim: 8,
        tail_dims: vec![8, 4, 4],
        ..ModelConfig::toy()
    }
}

pub fn op_cases() -> Vec<Case> {
    vec![
        Case { name: "add", build: |r| op(vec![randn(&[2, 3, 4], r), randn(&[2, 3, 4], r)], |t, v| t.add(v[0], v[1])) },
        Case { name: "sub", build: |r| op(vec![randn(&[2, 3, 4], r), randn(&[2, 3, 4], r)], |t, v| t.sub(v[0], v[1])) },
        Case { name: "mul", build: |r| op(vec![randn(&[2, 3, 4], r), randn(&[2, 3, 4], r)], |t, v| t.mul(v[0], v[1])) },
        Case { name: "scale", build: |r| op(vec![randn(&[3, 5], r)], |t, v| Ok(t.scale(v[0], -1.7))) },
        Case { name: "add_scalar", build: |r| op(vec![randn(&[3, 5], r)], |t, v| Ok(t.add_scalar(v[0], 0.3))) },
        Case {
            name: "add_bias",
            build: |r| op(vec![randn(&[2, 3, 4], r), randn(&[3], r)], |t, v| t.add_bias(v[0], v[1], 1)),
        },
        Case {
            name: "scale_channels",
            build: |r| op(vec![randn(&[2, 3, 2, 2], r), randn(&[2, 3], r)], |t, v| t.scale_channels(v[0], v[1])),
        },
        Case { name: "matmul", build: |r| op(vec![randn(&[3, 4], r), randn(&[4, 5], r)], |t, v| t.matmul(v[0], v[1])) },
        Case { name: "bmm", build: |r| op(vec![randn(&[2, 3, 4], r), randn(&[2, 4, 2], r)], |t, v| t.bmm(v[0], v[1])) },
        Case {
            name: "reshape",
            build: |r| {
                op(vec![randn(&[2, 6], r)], |t, v| {
                    let x = t.reshape(v[0], &[3, 4])?;
                    let w = t.constant(Tensor::from_fn(&[3, 4], |i| i as f64 - 4.0));
                    t.mul(x, w)
                })
            },
        },
        Case { name: "permute", build: |r| op(vec![randn(&[2, 3, 4], r)], |t, v| t.permute(v[0], &[2, 0, 1])) },
        Case { name: "transpose", build: |r| op(vec![randn(&[2, 3, 4], r)], |t, v| t.transpose(v[0], 0, 2)) },
        Case {
            name: "concat",
            build: |r| op(vec![randn(&[2, 1, 3], r), randn(&[2, 2, 3], r)], |t, v| t.concat(&[v[0], v[1]], 1)),
        },
        Case { name: "narrow", build: |r| op(vec![randn(&[2, 5, 3], r)], |t, v| t.narrow(v[0], 1, 1, 3)) },
        Case {
            name: "sum",
            build: |r| {
                op(vec![randn(&[3, 4], r)], |t, v| {
                    let sq = t.square(v[0]);
                    Ok(t.sum(sq))
                })
            },
        },
        Case {
            name: "mean",
            build: |r| {
                op(vec![randn(&[3, 4], r)], |t, v| {
                    let sq = t.square(v[0]);
                    Ok(t.mean(sq))
                })
            },
        },
        Case { name: "sum_axis", build: |r| op(vec![randn(&[2, 3, 4], r)], |t, v| t.sum_axis(v[0], 1)) },
        Case { name: "mean_axis", build: |r| op(vec![randn(&[2, 3, 4], r)], |t, v| t.mean_axis(v[0], 2)) },
        Case { name: "abs", build: |r| op(vec![away_from_zero(&[3, 4], r)], |t, v| Ok(t.abs(v[0]))) },
        Case { name: "square", build: |r| op(vec![randn(&[3, 4], r)], |t, v| Ok(t.square(v[0]))) },
        Case { name: "gelu", build: |r| op(vec![randn(&[3, 4], r)], |t, v| Ok(t.gelu(v[0]))) },
        Case { name: "sigmoid", build: |r| op(vec![randn(&[3, 4], r)], |t, v| Ok(t.sigmoid(v[0]))) },
        Case { name: "tanh", build: |r| op(vec![randn(&[3, 4], r)], |t, v| Ok(t.tanh(v[0]))) },
        Case { name: "softmax", build: |r| op(vec![randn(&[2, 3, 5], r)], |t, v| t.softmax(v[0], 2)) },
        Case {
            name: "layer_norm",
            build: |r| {
                op(vec![randn(&[2, 3, 6], r), randn(&[6], r), randn(&[6], r)], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
            },
        },
        Case { name: "conv2d", build: |r| conv_case(r, &[2, 3, 6, 6], &[4, 3, 3, 3], Conv2dParams::new(1, 1), true) },
        Case {
            name: "conv2d_strided",
            build: |r| conv_case(r, &[1, 2, 7, 7], &[3, 2, 3, 3], Conv2dParams::new(2, 1), true),
        },
        Case {
            name: "conv2d_dilated",
            build: |r| conv_case(r, &[1, 2, 8, 8], &[2, 2, 3, 3], Conv2dParams::dilated(2, 2), true),
        },
        Case {
            name: "conv2d_pointwise",
            build: |r| conv_case(r, &[2, 3, 4, 4], &[5, 3, 1, 1], Conv2dParams::default(), true),
        },
        Case {
            name: "conv2d_no_bias",
            build: |r| conv_case(r, &[1, 2, 5, 5], &[3, 2, 3, 3], Conv2dParams::new(1, 1), false),
        },
        Case {
            name: "deform_conv2d",
            build: |r| {
                let offsets = Tensor::uniform(&[1, 18, 5, 5], -1.8, 1.8, r);
                op(vec![randn(&[1, 2, 5, 5], r), offsets, randn(&[3, 2, 3, 3], r), randn(&[3], r)], |t, v| {
                    t.deform_conv2d(v[0], v[1], v[2], Some(v[3]))
                })
            },
        },
        Case { name: "upsample2x", build: |r| op(vec![randn(&[1, 2, 3, 3], r)], |t, v| t.upsample2x(v[0])) },
        Case { name: "avg_pool2x", build: |r| op(vec![randn(&[1, 2, 4, 6], r)], |t, v| t.avg_pool2x(v[0])) },
    ]
}

pub fn block_cases() -> Vec<Case> {
    vec![
        Case {
            name: "linear",
            build: |r| block(vec![randn(&[2, 3, 5], r)], r, |i| Linear::new(i, "fc", 5, 4), |b, t, p, x| b.forward(t, p, x[0])),
        },
        Case {
            name: "conv2d_layer",
            build: |r| {
                block(vec![randn(&[1, 3, 6, 6], r)], r,
                    |i| Conv2d::same(i, "conv", 3, 4, 3),
                    |b, t, p, x| b.forward(t, p, x[0]),
                )
            },
        },
        Case {
            name: "layer_norm_layer",
            build: |r| block(vec![randn(&[2, 4, 6], r)], r, |i| LayerNorm::new(i, "ln", 6), |b, t, p, x| b.forward(t, p, x[0])),
        },
        Case {
            name: "patch_embed_stem",
            build: |r| {
                block(vec![randn(&[1, 4, 16, 16], r)], r,
                    |i| PatchEmbed::new(i, "pe", PatchEmbedConfig::overlapped(4, 6, true)),
                    |b, t, p, x| b.forward(t, p, x[0]),
                )
            },
        },
        Case {
            name: "patch_embed_mini",
            build: |r| {
                block(vec![randn(&[1, 6, 8, 8], r)], r,
                    |i| PatchEmbed::new(i, "pe", PatchEmbedConfig::mini(6, 6)),
                    |b, t, p, x| b.forward(t, p, x[0]),
                )
            },
        },
        Case { name: "self_attention_sr2", build: |r| small_attention(r, 2) },
        Case { name: "self_attention_sr1", build: |r| small_attention(r, 1) },
        Case {
            name: "reference_attention",
            build: |r| {
                let cfg = AttentionConfig { embed_dim: 8, num_heads: 2, spatial_reduction_ratio: 2 };
                let grid = Grid { height: 4, width: 4 };
                block(vec![randn(&[1, 9, 8], r), randn(&[1, 16, 8], r)], r,
                    |i| MultiHeadAttention::new(i, "ra", cfg),
                    move |b, t, p, x| b.reference_attention(t, p, x[0], x[1], grid),
                )
            },
        },
        Case {
            name: "feed_forward",
            build: |r| {
                block(vec![randn(&[2, 3, 6], r)], r, |i| FeedForward::new(i, "ffn", 6, 2), |b, t, p, x| b.forward(t, p, x[0]))
            },
        },
        Case {
            name: "transformer_block",
            build: |r| {
                let cfg = AttentionConfig { embed_dim: 8, num_heads: 2, spatial_reduction_ratio: 2 };
                let grid = Grid { height: 4, width: 4 };
                block(vec![randn(&[1, 16, 8], r)], r,
                    |i| TransformerBlock::new(i, "blk", cfg, 2),
                    move |b, t, p, x| b.forward(t, p, x[0], grid),
                )
            },
        },
        Case {
            name: "deform_kernel",
            build: |r| {
                let offsets = Tensor::uniform(&[1, 18, 5, 5], -1.8, 1.8, r);
                block(vec![randn(&[1, 3, 5, 5], r), offsets], r,
                    |i| DeformKernel::new(i, "dk", 3, 2, 3),
                    |b, t, p, x| b.forward(t, p, x[0], x[1]),
                )
            },
        },
        Case {
            name: "offset_estimator",
            build: |r| {
                block(vec![randn(&[1, 3, 6, 6], r), randn(&[1, 3, 6, 6], r)], r,
                    |i| OffsetEstimator::new(i, "off", 3, 3),
                    |b, t, p, x| b.forward(t, p, x[0], x[1]),
                )
            },
        },
        Case {
            name: "patch_harmonization",
            build: |r| {
                block(vec![randn(&[2, 3, 4, 4], r), randn(&[2, 3, 4, 4], r)], r,
                    |i| PatchHarmonization::new(i, "ph", 3),
                    |b, t, p, x| b.forward(t, p, x[0], x[1]),
                )
            },
        },
        Case {
            name: "residual_block",
            build: |r| {
                block(vec![randn(&[1, 3, 5, 5], r)], r, |i| ResidualBlock::new(i, "res", 3), |b, t, p, x| b.forward(t, p, x[0]))
            },
        },
        Case {
            name: "upsample_conv",
            build: |r| {
                block(vec![randn(&[1, 3, 3, 3], r)], r, |i| UpsampleConv::new(i, "up", 3, 2), |b, t, p, x| b.forward(t, p, x[0]))
            },
        },
        Case {
            name: "ref_pa",
            build: |r| {
                block(vec![randn(&[1, 4, 6, 6], r), randn(&[1, 4, 6, 6], r)], r,
                    |i| RefPa::new(i, 4, 3),
                    |b, t, p, x| Ok(b.forward(t, p, x[0], x[1])?.aligned),
                )
            },
        },
        Case {
            name: "ref_pt",
            build: |r| {
                let cfg = AttentionConfig { embed_dim: 4, num_heads: 2, spatial_reduction_ratio: 1 };
                block(vec![randn(&[1, 4, 8, 8], r), randn(&[1, 4, 8, 8], r)], r,
                    |i| RefPt::new(i, cfg, 2),
                    |b, t, p, x| Ok(b.forward(t, p, x[0], x[1])?.features),
                )
            },
        },
        Case {
            name: "map_to_tokens",
            build: |r| op(vec![randn(&[2, 3, 2, 4], r)], |t, v| Ok(map_to_tokens(t, v[0])?.0)),
        },
        Case {
            name: "l1_loss",
            build: |r| op(loss_inputs(r), |t, v| l1_loss(t, v[0], v[1])),
        },
        Case {
            name: "perceptual_loss",
            build: |r| {
                let fx = extractor();
                op(loss_inputs(r), move |t, v| perceptual_loss(t, &fx, v[0], v[1]))
            },
        },
        Case {
            name: "style_loss",
            build: |r| {
                let fx = extractor();
                op(loss_inputs(r), move |t, v| style_loss(t, &fx, v[0], v[1]))
            },
        },
        Case {
            name: "joint_loss",
            build: |r| {
                let fx = extractor();
                op(loss_inputs(r), move |t, v| Ok(joint_loss(t, &fx, v[0], v[1], LossWeights::default())?.loss))
            },
        },
        Case { name: "transref_micro", build: micro_model },
    ]
}

fn micro_model(rng: &mut ChaCha8Rng) -> Result<Setup> {
    let mut params = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let net = InpaintNet::new(&micro_config(), &mut params, &mut init_rng)?;
    jitter(&mut params, rng);
    let mask = Tensor::from_fn(&[1, 1, 32, 32], |i| {
        let (y, x) = (i / 32, i % 32);
        f64::from(u8::from((8..20).contains(&y) && (10..26).contains(&x)))
    });
    let image = Tensor::uniform(&[1, 3, 32, 32], -1.0, 1.0, rng);
    let reference = Tensor::uniform(&[1, 3, 32, 32], -1.0, 1.0, rng);
    Ok(Setup {
        params,
        inputs: vec![image, reference],
        forward: Box::new(move |t, p, x| {
            let m = t.constant(mask.clone());
            Ok(net.inpaint(t, p, x[0], m, x[1])?.composite)
        }),
    })
}

pub fn all_cases() -> Vec<Case> {
    let mut v = op_cases();
    v.extend(block_cases());
    v
}

/// Runs one case over `seeds` seeds and returns the worst report.
pub fn run_case(case: &Case, seeds: u64) -> Result<GradCheckReport> {
    let cfg = GradCheckConfig::default();
    let mut worst = GradCheckReport::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ (seed * 7919));
        let setup = (case.build)(&mut rng)?;
        let report = check_gradients(&setup.params, &setup.inputs, &setup.forward, &cfg, seed)?;
        let (probes, below) = (worst.probes + report.probes, worst.below_noise + report.below_noise);
        if report.max_rel_error >= worst.max_rel_error {
            worst = report;
        }
        worst.probes = probes;
        worst.below_noise = below;
    }
    Ok(worst)
}

/// Direct bilinear read with zeros outside the grid.
fn bilinear_ref(x: &Tensor<f64>, n: usize, c: usize, y: f64, xx: f64) -> f64 {
    let (h, w) = (x.shape()[2] as isize, x.shape()[3] as isize);
    let (y0, x0) = (y.floor(), xx.floor());
    let (fy, fx) = (y - y0, xx - x0);
    let mut acc = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (iy, ix) = (y0 as isize + dy, x0 as isize + dx);
            if iy >= 0 && ix >= 0 && iy < h && ix < w {
                acc += wy * wx * x.at(&[n, c, iy as usize, ix as usize]);
            }
        }
    }
    acc
}

/// Deformable convolution evaluated tap by tap.
pub fn deform_reference(x: &Tensor<f64>, offsets: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, k) = (w.shape()[0], w.shape()[2]);
    let r = (k / 2) as isize;
    Tensor::from_fn(&[n, f, h, wd], |i| {
        let (ox, oy, fi, ni) = (i % wd, (i / wd) % h, (i / (wd * h)) % f, i / (wd * h * f));
        let mut acc = b[fi];
        for ky in 0..k {
            for kx in 0..k {
                let t = ky * k + kx;
                let py = (oy as isize + ky as isize - r) as f64 + offsets.at(&[ni, 2 * t, oy, ox]);
                let px = (ox as isize + kx as isize - r) as f64 + offsets.at(&[ni, 2 * t + 1, oy, ox]);
                for ci in 0..c {
                    acc += w.at(&[fi, ci, ky, kx]) * bilinear_ref(x, ni, ci, py, px);
                }
            }
        }
        acc
    })
}

fn deform(x: &Tensor<f64>, offsets: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
    let mut t = Tape::new();
    let (xv, ov, wv) = (t.constant(x.clone()), t.constant(offsets.clone()), t.constant(w.clone()));
    let bv = t.constant(Tensor::new(&[b.len()], b.to_vec()).unwrap());
    let y = t.deform_conv2d(xv, ov, wv, Some(bv)).unwrap();
    t.value(y).clone()
}

fn conv_same(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
    let bv = t.constant(Tensor::new(&[b.len()], b.to_vec()).unwrap());
    let pad = w.shape()[2] / 2;
    let y = t.conv2d(xv, wv, Some(bv), Conv2dParams::new(1, pad)).unwrap();
    t.value(y).clone()
}

/// Worst deviations over `seeds` instances: zero offsets against conv2d,
/// offset (+1, 0) against conv2d output read one row further down, and random
/// fractional offsets against [`deform_reference`].
pub fn deform_oracle_errors(seeds: u64) -> (f64, f64, f64) {
    let (mut zero, mut integer, mut fractional) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = if seed % 2 == 0 { 3 } else { 5 };
        let (n, c, h, wd, f) = (2, 3, 7, 6, 4);
        let x = randn(&[n, c, h, wd], &mut rng);
        let w = randn(&[f, c, k, k], &mut rng);
        let b: Vec<f64> = (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let taps = 2 * k * k;

        let zeros = Tensor::zeros(&[n, taps, h, wd]);
        zero = zero.max(deform(&x, &zeros, &w, &b).max_abs_diff(&conv_same(&x, &w, &b)));

        let down = Tensor::from_fn(&[n, taps, h, wd], |i| if (i / (h * wd)) % 2 == 0 { 1.0 } else { 0.0 });
        let taller = Tensor::from_fn(&[n, c, h + 1, wd], |i| {
            let (xx, y, rest) = (i % wd, (i / wd) % (h + 1), i / (wd * (h + 1)));
            if y < h { x.data()[(rest * h + y) * wd + xx] } else { 0.0 }
        });
        let conv = conv_same(&taller, &w, &b);
        let shifted = Tensor::from_fn(&[n, f, h, wd], |i| {
            let (xx, y, rest) = (i % wd, (i / wd) % h, i / (wd * h));
            conv.data()[(rest * (h + 1) + y + 1) * wd + xx]
        });
        integer = integer.max(deform(&x, &down, &w, &b).max_abs_diff(&shifted));

        let offsets = Tensor::uniform(&[n, taps, h, wd], -2.5, 2.5, &mut rng);
        fractional = fractional.max(deform(&x, &offsets, &w, &b).max_abs_diff(&deform_reference(&x, &offsets, &w, &b)));
    }
    (zero, integer, fractional)
}

/// Worst deviations over `seeds` instances: attention row sums from 1, reference
/// attention on one stream against self-attention, and (for ratio 1) the module
/// against a hand-built `softmax(QKᵀ/√d)V` per head.
pub fn attention_identity_errors(seeds: u64) -> (f64, f64, f64) {
    let (mut rows, mut reduce, mut naive) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let sr = [1, 2, 4][seed as usize % 3];
        let heads = [1, 2, 4][(seed as usize / 3) % 3];
        let cfg = AttentionConfig { embed_dim: 8, num_heads: heads, spatial_reduction_ratio: sr };
        let grid = Grid { height: 8, width: 8 };
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut Init::new(&mut store, &mut rng), "mha", cfg).unwrap();
        jitter(&mut store, &mut rng);
        let x = randn(&[2, 64, 8], &mut rng);

        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let out = mha.forward_with_weights(&mut t, &p, xv, xv, grid).unwrap();
        let lk = t.shape(out.weights)[2];
        for row in t.value(out.weights).data().chunks(lk) {
            rows = rows.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let s = mha.self_attention(&mut t, &p, xv, grid).unwrap();
        let x2 = t.constant(x.clone());
        let r = mha.reference_attention(&mut t, &p, xv, x2, grid).unwrap();
        reduce = reduce.max(t.value(s).max_abs_diff(t.value(r)));

        if sr == 1 {
            let lin = |l: &Linear, v: &[f64]| -> Vec<f64> {
                let (w, b) = (store.get(l.weight), store.get(l.bias));
                (0..l.out_dim)
                    .map(|o| b.data()[o] + (0..l.in_dim).map(|i| w.at(&[i, o]) * v[i]).sum::<f64>())
                    .collect()
            };
            let dh = 8 / heads;
            for n in 0..2 {
                let tok = |i: usize| &x.data()[(n * 64 + i) * 8..(n * 64 + i + 1) * 8];
                let q: Vec<_> = (0..64).map(|i| lin(&mha.query, tok(i))).collect();
                let k: Vec<_> = (0..64).map(|i| lin(&mha.key, tok(i))).collect();
                let v: Vec<_> = (0..64).map(|i| lin(&mha.value, tok(i))).collect();
                for i in 0..64 {
                    let mut mixed = vec![0.0; 8];
                    for h in 0..heads {
                        let hs = h * dh..(h + 1) * dh;
                        let scores: Vec<f64> = (0..64)
                            .map(|j| hs.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() / (dh as f64).sqrt())
                            .collect();
                        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        for d in hs {
                            mixed[d] = (0..64).map(|j| e[j] / z * v[j][d]).sum();
                        }
                    }
                    let want = lin(&mha.out, &mixed);
                    for (d, w) in want.iter().enumerate() {
                        naive = naive.max((t.value(s).at(&[n, i, d]) - w).abs());
                    }
                }
            }
        }
    }
    (rows, reduce, naive)
}

pub struct EndToEnd {
    /// `(channels, height, width)` of each encoder stage output.
    pub grids: Vec<(usize, usize, usize)>,
    pub output_shape: Vec<usize>,
    /// Known pixels of the composite equal the masked input exactly.
    pub known_preserved: bool,
    /// Hole-free mask returns the quantized input unchanged.
    pub identity_round_trip: bool,
}

/// Runs the toy model on a 256×256 synthetic scene.
pub fn end_to_end_256(seed: u64) -> Result<EndToEnd> {
    use transref::data::synth::Scene;
    use transref::data::{gen_irregular_mask, rgb_to_tensor, tensor_to_rgb, RatioBin};
    use transref::model::InpaintingModel;

    let model = InpaintingModel::<f32>::new(&ModelConfig::toy(), seed)?;
    let scene = Scene::new(256, 256, 8, seed);
    let img = scene.view(0, 0, 256, 256);
    let image = rgb_to_tensor::<f32>(&img).reshape(&[1, 3, 256, 256])?;
    let reference = rgb_to_tensor::<f32>(&scene.view(5, 3, 256, 256)).reshape(&[1, 3, 256, 256])?;
    let spec = gen_irregular_mask(RatioBin::new(3).unwrap(), true, seed, 256, 256)?;
    let mask = spec.mask.to_tensor::<f32>().reshape(&[1, 1, 256, 256])?;

    let mut t = Tape::new();
    let p = model.params.bind(&mut t, false);
    let (iv, mv, rv) = (t.constant(image.clone()), t.constant(mask.clone()), t.constant(reference.clone()));
    let out = model.net.inpaint(&mut t, &p, iv, mv, rv)?;
    let enc = model.net.encode(&mut t, &p, out.masked_input, mv, rv)?;
    let grids = enc
        .features
        .iter()
        .map(|&f| {
            let s = t.shape(f);
            (s[1], s[2], s[3])
        })
        .collect();
    let output_shape = t.shape(out.composite).to_vec();
    let (comp, masked) = (t.value(out.composite).data(), t.value(out.masked_input).data());
    let plane = 256 * 256;
    let known_preserved = (0..3 * plane).all(|i| mask.data()[i % plane] != 0.0 || comp[i].to_bits() == masked[i].to_bits());

    let clear = Tensor::zeros(&[1, 1, 256, 256]);
    let same = model.inpaint(&image, &clear, &reference)?;
    let identity_round_trip = tensor_to_rgb(&same.reshape(&[3, 256, 256])?)? == img;
    Ok(EndToEnd { grids, output_shape, known_preserved, identity_round_trip })
}

pub struct LossArithmetic {
    /// Largest relative deviation of the l1/perceptual/style terms from loops over the features.
    pub term_error: f64,
    /// `joint` equals `(1·l1 + 0.1·perceptual) + 250·style` bit for bit.
    pub joint_exact: bool,
    /// Largest |term| when output and target coincide.
    pub identical_max: f64,
    /// `|c₁ − c₂|` recovered exactly by l1 on constant images.
    pub constant_l1_exact: bool,
}

fn gram_naive(f: &Tensor<f64>, n: usize) -> Vec<f64> {
    let (c, hw) = (f.shape()[1], f.shape()[2] * f.shape()[3]);
    let d = &f.data()[n * c * hw..(n + 1) * c * hw];
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            g[i * c + j] = (0..hw).map(|p| d[i * hw + p] * d[j * hw + p]).sum::<f64>() / (c * hw) as f64;
        }
    }
    g
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn loss_arithmetic(seeds: u64) -> Result<LossArithmetic> {
    use transref::losses::FeatureExtractor;

    let fx = ConvPyramid::<f64>::seeded(7)?;
    let w = LossWeights::default();
    let mut report = LossArithmetic { term_error: 0.0, joint_exact: true, identical_max: 0.0, constant_l1_exact: true };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = Tensor::<f64>::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng);
        let g = Tensor::<f64>::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng);
        let mut t = Tape::new();
        let (ov, gv) = (t.constant(o.clone()), t.constant(g.clone()));
        let b = joint_loss(&mut t, &fx, ov, gv, w)?.breakdown;

        let fo = fx.extract(&mut t, ov)?;
        let fg = fx.extract(&mut t, gv)?;
        let l1 = mean_abs_diff(o.data(), g.data());
        let mut perceptual = 0.0;
        let mut style = 0.0;
        for (&a, &c) in fo.iter().zip(&fg) {
            let (a, c) = (t.value(a).clone(), t.value(c).clone());
            perceptual += mean_abs_diff(a.data(), c.data());
            let (ga, gc): (Vec<f64>, Vec<f64>) = (
                (0..2).flat_map(|n| gram_naive(&a, n)).collect(),
                (0..2).flat_map(|n| gram_naive(&c, n)).collect(),
            );
            style += mean_abs_diff(&ga, &gc);
        }
        style /= fo.len() as f64;
        for (got, want) in [(b.l1, l1), (b.perceptual, perceptual), (b.style, style)] {
            report.term_error = report.term_error.max((got - want).abs() / want.abs());
        }
        let joint = (w.l1 * b.l1 + w.perceptual * b.perceptual) + w.style * b.style;
        report.joint_exact &= joint.to_bits() == b.joint.to_bits();

        let mut t = Tape::new();
        let (ov, ov2) = (t.constant(o.clone()), t.constant(o.clone()));
        let same = joint_loss(&mut t, &fx, ov, ov2, w)?.breakdown;
        for v in [same.l1, same.perceptual, same.style, same.joint] {
            report.identical_max = report.identical_max.max(v.abs());
        }

        let (c1, c2) = (f64::from(rng.gen_range(-64..64)) / 64.0, f64::from(rng.gen_range(-64..64)) / 64.0);
        let mut t = Tape::new();
        let a = t.constant(Tensor::full(&[1, 3, 8, 8], c1));
        let c = t.constant(Tensor::full(&[1, 3, 8, 8], c2));
        let l = l1_loss(&mut t, a, c)?;
        report.constant_l1_exact &= t.value(l).item() == (c1 - c2).abs();
    }
    Ok(report)
}
