//! Training objective: pixel L1, perceptual and style losses over a
//! pluggable multi-stage feature extractor.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::nn::{Conv2d, Init};
use crate::tensor::{read_checkpoint, Bound, ParamStore, Scalar, Tape, Tensor, Var};

/// Number of stages the default extractor exposes.
pub const EXTRACTOR_STAGES: usize = 5;

/// Maps an RGB batch `[N,3,H,W]` to an ordered list of feature maps.
pub trait FeatureExtractor<T: Scalar> {
    fn stage_count(&self) -> usize;

    fn extract(&self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>>;
}

/// Fixed five-stage convolutional pyramid: each stage after the first halves
/// the resolution with 2×2 average pooling, then applies conv 3×3 + GELU.
/// Weights come from a seed or from a checkpoint.
#[derive(Clone, Debug)]
pub struct ConvPyramid<T> {
    convs: Vec<Conv2d>,
    params: ParamStore<T>,
}

impl<T: Scalar> ConvPyramid<T> {
    pub const DEFAULT_WIDTHS: [usize; EXTRACTOR_STAGES] = [16, 32, 64, 64, 64];

    pub fn seeded(seed: u64) -> Result<Self> {
        Self::with_widths(&Self::DEFAULT_WIDTHS, seed)
    }

    pub fn with_widths(widths: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, &mut rng);
        let mut convs = Vec::with_capacity(widths.len());
        let mut in_ch = 3;
        for (i, &w) in widths.iter().enumerate() {
            let conv = Conv2d::same(&mut init, &format!("fx.stage{i}"), in_ch, w, 3)?;
            // He scaling keeps activations from shrinking through the stack.
            let shape = init.store.get(conv.weight).shape().to_vec();
            let std = (2.0 / (in_ch * 9) as f64).sqrt();
            *init.store.get_mut(conv.weight) = Tensor::randn(&shape, std, init.rng);
            convs.push(conv);
            in_ch = w;
        }
        Ok(Self { convs, params })
    }

    /// Replaces the seeded weights with externally supplied ones
    /// (parameter names `fx.stage{i}.weight` / `.bias`).
    pub fn load_weights(&mut self, checkpoint: &Path) -> Result<()> {
        let records = read_checkpoint(std::io::BufReader::new(std::fs::File::open(checkpoint)?))?;
        self.params.load_records(records)
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.params.bind(tape, false)
    }
}

impl<T: Scalar> FeatureExtractor<T> for ConvPyramid<T> {
    fn stage_count(&self) -> usize {
        self.convs.len()
    }

    fn extract(&self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>> {
        let p = self.bind(tape);
        let mut x = image;
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                x = tape.avg_pool2x(x)?;
            }
            x = conv.forward(tape, &p, x)?;
            x = tape.gelu(x);
            out.push(x);
        }
        Ok(out)
    }
}

/// Trade-off weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 1.0, perceptual: 0.1, style: 250.0 }
    }
}

impl LossWeights {
    pub fn combine(&self, l1: f64, perceptual: f64, style: f64) -> f64 {
        self.l1 * l1 + self.perceptual * perceptual + self.style * style
    }
}

/// Scalar values of each term, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub perceptual: f64,
    pub style: f64,
    pub joint: f64,
}

pub struct JointLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

fn check_same<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return contract(op, format!("shapes {:?} and {:?} differ", tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, output: Var, target: Var) -> Result<Var> {
    check_same(tape, "l1_loss", output, target)?;
    let d = tape.sub(output, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

fn extract_pair<T: Scalar>(
    tape: &mut Tape<T>,
    fx: &dyn FeatureExtractor<T>,
    output: Var,
    target: Var,
) -> Result<(Vec<Var>, Vec<Var>)> {
    check_same(tape, "feature loss", output, target)?;
    let s = tape.shape(output);
    if s.len() != 4 || s[1] != 3 {
        return contract("feature loss", format!("expected RGB batch [N,3,H,W], got {s:?}"));
    }
    let fo = fx.extract(tape, output)?;
    let ft = fx.extract(tape, target)?;
    if fo.len() != fx.stage_count() || ft.len() != fx.stage_count() {
        return contract(
            "feature loss",
            format!("extractor declares {} stages but produced {}", fx.stage_count(), fo.len()),
        );
    }
    Ok((fo, ft))
}

/// `Σ_i (1/N_i)‖φ_i(out) − φ_i(gt)‖₁`, averaged over the batch.
pub fn perceptual_loss<T: Scalar>(
    tape: &mut Tape<T>,
    fx: &dyn FeatureExtractor<T>,
    output: Var,
    target: Var,
) -> Result<Var> {
    let (fo, ft) = extract_pair(tape, fx, output, target)?;
    let mut total: Option<Var> = None;
    for (a, b) in fo.into_iter().zip(ft) {
        let term = l1_loss(tape, a, b)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| crate::Error::Contract { op: "perceptual_loss", detail: "extractor has no stages".into() })
}

/// Batched Gram matrices `[N, C, C]` of `[N, C, H, W]` features, normalized by `C·H·W`.
pub fn gram<T: Scalar>(tape: &mut Tape<T>, features: Var) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 4 {
        return contract("gram_matrix", format!("expected [N,C,H,W], got {s:?}"));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let f = tape.reshape(features, &[n, c, hw])?;
    let ft = tape.transpose(f, 1, 2)?;
    let g = tape.bmm(f, ft)?;
    Ok(tape.scale(g, T::one() / T::from_usize(c * hw).unwrap()))
}

/// Gram matrix of one `[C, H, W]` feature map.
pub fn gram_matrix<T: Scalar>(feature: &Tensor<T>) -> Result<Tensor<T>> {
    let s = feature.shape();
    if s.len() != 3 {
        return contract("gram_matrix", format!("expected [C,H,W], got {s:?}"));
    }
    let mut tape = Tape::new();
    let f = tape.constant(feature.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let g = gram(&mut tape, f)?;
    tape.value(g).clone().reshape(&[s[0], s[0]])
}

/// Mean over stages of the mean absolute Gram difference.
pub fn style_loss<T: Scalar>(
    tape: &mut Tape<T>,
    fx: &dyn FeatureExtractor<T>,
    output: Var,
    target: Var,
) -> Result<Var> {
    let (fo, ft) = extract_pair(tape, fx, output, target)?;
    style_from_features(tape, &fo, &ft)
}

fn style_from_features<T: Scalar>(tape: &mut Tape<T>, fo: &[Var], ft: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(fo.len());
    for (&a, &b) in fo.iter().zip(ft) {
        let ga = gram(tape, a)?;
        let gb = gram(tape, b)?;
        terms.push(l1_loss(tape, ga, gb)?);
    }
    let Some(&first) = terms.first() else {
        return contract("style_loss", "extractor has no stages");
    };
    let mut total = first;
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, T::one() / T::from_usize(terms.len()).unwrap()))
}

/// `λ_l1·L1 + λ_p·Lp + λ_s·Ls` with the per-term breakdown.
pub fn joint_loss<T: Scalar>(
    tape: &mut Tape<T>,
    fx: &dyn FeatureExtractor<T>,
    output: Var,
    target: Var,
    weights: LossWeights,
) -> Result<JointLoss> {
    let l1 = l1_loss(tape, output, target)?;
    let (fo, ft) = extract_pair(tape, fx, output, target)?;
    let mut perceptual = None;
    for (&a, &b) in fo.iter().zip(&ft) {
        let term = l1_loss(tape, a, b)?;
        perceptual = Some(match perceptual {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let Some(perceptual) = perceptual else {
        return contract("joint_loss", "extractor has no stages");
    };
    let style = style_from_features(tape, &fo, &ft)?;
    let a = tape.scale(l1, T::from_f64_lossy(weights.l1));
    let b = tape.scale(perceptual, T::from_f64_lossy(weights.perceptual));
    let c = tape.scale(style, T::from_f64_lossy(weights.style));
    let ab = tape.add(a, b)?;
    let loss = tape.add(ab, c)?;
    let value = |v: Var| tape.value(v).item().to_f64().unwrap_or(f64::NAN);
    let breakdown = LossBreakdown {
        l1: value(l1),
        perceptual: value(perceptual),
        style: value(style),
        joint: value(loss),
    };
    Ok(JointLoss { loss, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights_combine() {
        let w = LossWeights::default();
        assert_eq!(w.combine(2.0, 10.0, 0.01), 5.5);
    }

    #[test]
    fn gram_of_orthogonal_channels_is_diagonal() {
        let f = Tensor::<f64>::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = gram_matrix(&f).unwrap();
        assert_eq!(g.at(&[0, 1]), 0.0);
        assert_eq!(g.at(&[1, 0]), 0.0);
        assert!(g.at(&[0, 0]) > 0.0);
    }

    #[test]
    fn gram_of_duplicated_channel_is_constant() {
        let f = Tensor::<f64>::new(&[2, 1, 3], vec![1.0, -2.0, 0.5, 1.0, -2.0, 0.5]).unwrap();
        let g = gram_matrix(&f).unwrap();
        let v = g.at(&[0, 0]);
        assert!(g.data().iter().all(|&x| x == v));
    }

    #[test]
    fn default_extractor_has_five_stages() {
        let fx = ConvPyramid::<f32>::seeded(1).unwrap();
        assert_eq!(fx.stage_count(), EXTRACTOR_STAGES);
    }
}
