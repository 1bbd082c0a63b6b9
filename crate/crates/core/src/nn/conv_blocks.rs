use rand::Rng;

use super::layers::{Conv2d, Init};
use crate::error::Result;
use crate::tensor::{Bound, Scalar, Tape, Var};

/// `x + conv(gelu(conv(x)))` with 3×3 same-size convolutions.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResidualBlock {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, channels: usize) -> Result<Self> {
        init.scope(name, |s| {
            Ok(Self {
                conv1: Conv2d::same(s, "conv1", channels, channels, 3)?,
                conv2: Conv2d::same(s, "conv2", channels, channels, 3)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        let h = self.conv2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Nearest 2× upsampling followed by a 3×3 convolution.
#[derive(Clone, Debug)]
pub struct UpsampleConv {
    pub conv: Conv2d,
}

impl UpsampleConv {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, in_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(Self { conv: Conv2d::same(init, name, in_channels, out_channels, 3)? })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let up = tape.upsample2x(x)?;
        self.conv.forward(tape, p, up)
    }
}
