//! Offset estimation and deformable convolution for patch alignment.

use rand::Rng;

use super::layers::{Conv2d, Init};
use crate::error::{contract, Result};
use crate::tensor::{Bound, Conv2dParams, ParamId, Scalar, Tape, Tensor, Var};

/// Weights of a `k×k` deformable kernel. The fixed sampling grid is the
/// row-major enumeration of `(-k/2..=k/2)²`; learned offsets arrive per input.
#[derive(Clone, Debug)]
pub struct DeformKernel {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DeformKernel {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return contract("DeformKernel", format!("kernel size {kernel} must be odd"));
        }
        let fan_in = (in_channels * kernel * kernel) as f64;
        init.scope(name, |s| {
            Ok(Self {
                weight: s.normal("weight", &[out_channels, in_channels, kernel, kernel], (1.0 / fan_in).sqrt())?,
                bias: s.zeros("bias", &[out_channels])?,
                kernel,
                in_channels,
                out_channels,
            })
        })
    }

    pub fn offset_channels(&self) -> usize {
        2 * self.kernel * self.kernel
    }

    /// Fixed tap offsets `p_n` as (dy, dx).
    pub fn grid(&self) -> Vec<(isize, isize)> {
        let r = (self.kernel / 2) as isize;
        (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, offsets: Var) -> Result<Var> {
        tape.deform_conv2d(x, offsets, p[self.weight], Some(p[self.bias]))
    }
}

/// Three dilated 3×3 convolutions (dilations 1, 2, 4) over the concatenated
/// input and reference features, producing `2k²` offset channels. The last
/// layer starts at zero so alignment begins as a plain convolution.
#[derive(Clone, Debug)]
pub struct OffsetEstimator {
    pub layers: [Conv2d; 3],
    pub channels: usize,
}

impl OffsetEstimator {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        init.scope(name, |s| {
            let c0 = Conv2d::new(s, "conv0", 2 * channels, channels, 3, Conv2dParams::dilated(1, 1))?;
            let c1 = Conv2d::new(s, "conv1", channels, channels, 3, Conv2dParams::dilated(2, 2))?;
            let c2 = Conv2d::new(s, "conv2", channels, 2 * kernel * kernel, 3, Conv2dParams::dilated(4, 4))?;
            let w = s.store.get(c2.weight).shape().to_vec();
            *s.store.get_mut(c2.weight) = Tensor::zeros(&w);
            Ok(Self { layers: [c0, c1, c2], channels })
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, input: Var, reference: Var) -> Result<Var> {
        if tape.shape(input) != tape.shape(reference) {
            return contract(
                "dynamic_offset_estimator",
                format!("input {:?} and reference {:?} differ", tape.shape(input), tape.shape(reference)),
            );
        }
        let x = tape.concat(&[input, reference], 1)?;
        let x = self.layers[0].forward(tape, p, x)?;
        let x = tape.gelu(x);
        let x = self.layers[1].forward(tape, p, x)?;
        let x = tape.gelu(x);
        self.layers[2].forward(tape, p, x)
    }
}
