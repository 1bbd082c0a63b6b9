//! Parameterized primitives shared by every block.

use rand::Rng;

use crate::error::{contract, Result};
use crate::tensor::{Bound, Conv2dParams, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Registration context: a store, a name prefix and an RNG for initialization.
pub struct Init<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> Init<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<O>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_, T, R>) -> Result<O>) -> Result<O> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut child = Init { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut child)
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.add(full, value)
    }

    /// Truncation-free normal init with fan-in scaling.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, self.rng);
        self.param(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, Tensor::ones(shape))
    }
}

/// Dense projection over the last axis: `y = x·W + b`, `W` shaped `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        init.scope(name, |s| {
            Ok(Self {
                weight: s.normal("weight", &[in_dim, out_dim], (1.0 / in_dim as f64).sqrt())?,
                bias: s.zeros("bias", &[out_dim])?,
                in_dim,
                out_dim,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return contract("linear", format!("expected last dim {}, got {shape:?}", self.in_dim));
        }
        let rows = shape.iter().product::<usize>() / self.in_dim;
        let flat = tape.reshape(x, &[rows, self.in_dim])?;
        let y = tape.matmul(flat, p[self.weight])?;
        let y = tape.add_bias(y, p[self.bias], 1)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, &out_shape)
    }
}

/// 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub params: Conv2dParams,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        params: Conv2dParams,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel) as f64;
        init.scope(name, |s| {
            Ok(Self {
                weight: s.normal("weight", &[out_channels, in_channels, kernel, kernel], (1.0 / fan_in).sqrt())?,
                bias: s.zeros("bias", &[out_channels])?,
                params,
                in_channels,
                out_channels,
                kernel,
            })
        })
    }

    /// Same-size convolution with odd `kernel`.
    pub fn same<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::new(init, name, in_channels, out_channels, kernel, Conv2dParams::new(1, kernel / 2))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.weight], Some(p[self.bias]), self.params)
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, dim: usize) -> Result<Self> {
        init.scope(name, |s| Ok(Self { gamma: s.ones("gamma", &[dim])?, beta: s.zeros("beta", &[dim])?, eps: 1e-5 }))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], T::from_f64_lossy(self.eps))
    }
}
