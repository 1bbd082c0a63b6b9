//! Conversions between feature maps `[N, C, H, W]` and token sequences `[N, H·W, C]`.

use crate::error::{contract, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Spatial extent of a token sequence, needed to fold it back into a map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

pub fn map_to_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<(Var, Grid)> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return contract("map_to_tokens", format!("expected [N,C,H,W], got {s:?}"));
    }
    let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    let tokens = tape.transpose(flat, 1, 2)?;
    Ok((tokens, Grid { height: s[2], width: s[3] }))
}

pub fn tokens_to_map<T: Scalar>(tape: &mut Tape<T>, x: Var, grid: Grid) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != grid.tokens() {
        return contract("tokens_to_map", format!("{s:?} does not hold a {}×{} grid", grid.height, grid.width));
    }
    let t = tape.transpose(x, 1, 2)?;
    tape.reshape(t, &[s[0], s[2], grid.height, grid.width])
}
