use rand::Rng;

use super::layers::{Conv2d, Init, Linear};
use crate::error::{contract, Result};
use crate::tensor::{Bound, Scalar, Tape, Var};

/// Squeeze-and-gate channel recalibration that blends aligned reference
/// features into the input features.
#[derive(Clone, Debug)]
pub struct PatchHarmonization {
    pub mix1: Conv2d,
    pub mix2: Conv2d,
    pub gate: Linear,
    pub reduce: Conv2d,
    pub channels: usize,
}

pub struct HarmonizationOutput {
    pub features: Var,
    /// Per-channel gate `[N, 2C]`, strictly inside (0, 1).
    pub gate: Var,
}

impl PatchHarmonization {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, channels: usize) -> Result<Self> {
        let wide = 2 * channels;
        init.scope(name, |s| {
            Ok(Self {
                mix1: Conv2d::same(s, "mix1", wide, wide, 1)?,
                mix2: Conv2d::same(s, "mix2", wide, wide, 1)?,
                gate: Linear::new(s, "gate", wide, wide)?,
                reduce: Conv2d::same(s, "reduce", wide, channels, 1)?,
                channels,
            })
        })
    }

    pub fn forward_with_gate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        input: Var,
        aligned: Var,
    ) -> Result<HarmonizationOutput> {
        let s = tape.shape(input).to_vec();
        if s != tape.shape(aligned) || s.len() != 4 || s[1] != self.channels {
            return contract(
                "patch_harmonization",
                format!("input {s:?} and aligned {:?} must both be [N, {}, H, W]", tape.shape(aligned), self.channels),
            );
        }
        let x = tape.concat(&[input, aligned], 1)?;
        let x = self.mix1.forward(tape, p, x)?;
        let x = tape.gelu(x);
        let x = self.mix2.forward(tape, p, x)?;
        let x = tape.gelu(x);
        let pooled = tape.reshape(x, &[s[0], 2 * self.channels, s[2] * s[3]])?;
        let pooled = tape.mean_axis(pooled, 2)?;
        let gate = self.gate.forward(tape, p, pooled)?;
        let gate = tape.sigmoid(gate);
        let x = tape.scale_channels(x, gate)?;
        let x = self.reduce.forward(tape, p, x)?;
        let features = tape.gelu(x);
        Ok(HarmonizationOutput { features, gate })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, input: Var, aligned: Var) -> Result<Var> {
        Ok(self.forward_with_gate(tape, p, input, aligned)?.features)
    }
}
