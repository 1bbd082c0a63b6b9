use super::kernels::{self, Conv2dParams, ConvGeom, DeformGeom};
use super::{Scalar, Tensor};
use crate::error::{contract, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias { x: Var, bias: Var, axis: usize },
    ScaleChannels { x: Var, gate: Var },
    MatMul(Var, Var),
    Bmm(Var, Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Abs(Var),
    Square(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, p: Conv2dParams },
    DeformConv { x: Var, offsets: Var, w: Var, b: Option<Var> },
    Upsample2x(Var),
    AvgPool2x(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of differentiable operations. Nodes are appended in
/// execution order, so the vector is already topologically sorted.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    x * half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let cdf = half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64_lossy(0.398_942_280_401_432_7);
    cdf + x * pdf
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an input tensor. Gradients are kept only for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return contract(op, format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// Adds a 1-D `bias` along `axis` of `x`; the only broadcasting form the engine supports.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        if axis >= xs.len() || bs != [xs[axis]] {
            return contract("add_bias", format!("bias {bs:?} does not match axis {axis} of {xs:?}"));
        }
        let (outer, len, inner) = split_at_axis(&xs, axis);
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for (a, &bv) in b.iter().enumerate().take(len) {
                let base = (o * len + a) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let value = Tensor::new(&xs, data)?;
        Ok(self.push(value, Op::AddBias { x, bias, axis }, &[x, bias]))
    }

    /// Multiplies `x[n, c, ...]` by `gate[n, c]`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gate);
        if xs.len() < 2 || gs != &xs[..2] {
            return contract("scale_channels", format!("gate {gs:?} does not match {xs:?}"));
        }
        let inner: usize = xs[2..].iter().product();
        let g = self.value(gate).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (chunk, &gv) in data.chunks_mut(inner).zip(&g) {
            chunk.iter_mut().for_each(|v| *v = *v * gv);
        }
        let value = Tensor::new(&xs, data)?;
        Ok(self.push(value, Op::ScaleChannels { x, gate }, &[x, gate]))
    }

    /// `[M, K] × [K, N] → [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return contract("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), (k as isize, 1), self.value(b).data(), (n as isize, 1), T::zero(), &mut out);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched `[B, M, K] × [B, K, N] → [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return contract("bmm", format!("cannot batch-multiply {sa:?} by {sb:?}"));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bt * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            T::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &db[i * k * n..(i + 1) * k * n],
                (n as isize, 1),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(&[bt, m, n], out)?;
        Ok(self.push(value, Op::Bmm(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return contract("permute", format!("{perm:?} is not a permutation of rank {}", shape.len()));
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, perm);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(x).len()).collect();
        if a >= perm.len() || b >= perm.len() {
            return contract("transpose", format!("axes ({a}, {b}) out of range"));
        }
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return contract("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return contract("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return contract("concat", format!("{s:?} incompatible with {base:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return contract("narrow", format!("[{start}, {}) out of range on axis {axis} of {shape:?}", start + len));
        }
        let (outer, full, inner) = split_at_axis(&shape, axis);
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Sums out `axis`, removing it from the shape (rank-1 inputs reduce to `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return contract("sum_axis", format!("axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let d = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &d[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc = *acc + v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = match self.shape(x).get(axis) {
            Some(&l) => l,
            None => return contract("mean_axis", format!("axis {axis} out of range")),
        };
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::from_usize(len).unwrap()))
    }

    /// Elementwise |x|; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `x·Φ(x)` with the exact error-function CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return contract("softmax", format!("axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| data[at(a)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for a in 0..len {
                    let e = (data[at(a)] - max).exp();
                    data[at(a)] = e;
                    total = total + e;
                }
                for a in 0..len {
                    data[at(a)] = data[at(a)] / total;
                }
            }
        }
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return contract(
                "layer_norm",
                format!("gamma {:?} / beta {:?} must be [{d}]", self.shape(gamma), self.shape(beta)),
            );
        }
        let (g, b) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let src = self.value(x).data();
        let rows = src.len() / d;
        let dn = T::from_usize(d).unwrap();
        let mut data = vec![T::zero(); src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, (o, &v)) in data[r * d..(r + 1) * d].iter_mut().zip(row).enumerate() {
                *o = (v - mean) * rs * g[j] + b[j];
            }
        }
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, rstd }, &[x, gamma, beta]))
    }

    /// Cross-correlation of `[N, C, H, W]` with `[F, C, kH, kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: Conv2dParams) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), p)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.f] {
                return contract("conv2d", format!("bias {:?} must be [{}]", self.shape(b), geom.f));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[geom.n, geom.f, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, p }, &inputs))
    }

    /// Deformable convolution with odd square kernel, unit stride and same padding.
    /// Offsets are `[N, 2k², H, W]` with (Δy, Δx) interleaved per tap.
    pub fn deform_conv2d(&mut self, x: Var, offsets: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let geom = DeformGeom::new(self.shape(x), self.shape(offsets), self.shape(w))?;
        if let Some(b) = b {
            if self.shape(b) != [geom.f] {
                return contract("deformable_conv", format!("bias {:?} must be [{}]", self.shape(b), geom.f));
            }
        }
        let out = kernels::deform_forward(
            &geom,
            self.value(x).data(),
            self.value(offsets).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[geom.n, geom.f, geom.h, geom.w], out)?;
        let mut inputs = vec![x, offsets, w];
        inputs.extend(b);
        Ok(self.push(value, Op::DeformConv { x, offsets, w, b }, &inputs))
    }

    /// Nearest-neighbour 2× upsampling of the last two axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return contract("upsample2x", format!("need at least 2 axes, got {shape:?}"));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * 4);
        for plane in src.chunks(h * w) {
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for &v in row {
                    data.push(v);
                    data.push(v);
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] *= 2;
        out_shape[r - 1] *= 2;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Upsample2x(x), &[x]))
    }

    /// 2×2 average pooling of the last two axes (both must be even).
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 2] % 2 != 0 || shape[r - 1] % 2 != 0 {
            return contract("avg_pool2x", format!("need even spatial dims, got {shape:?}"));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let q = T::from_f64_lossy(0.25);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() / 4);
        for plane in src.chunks(h * w) {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    let i = 2 * y * w + 2 * xx;
                    data.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * q);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] /= 2;
        out_shape[r - 1] /= 2;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::AvgPool2x(x), &[x]))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return contract("backward", format!("loss must be scalar, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let kept = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    Some(g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: kept, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if let Some(slot) = self.slot(grads, v) {
            for (i, s) in slot.iter_mut().enumerate() {
                *s = *s + f(i);
            }
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |k| g[k]);
                self.accumulate(grads, *b, |k| g[k]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |k| g[k]);
                self.accumulate(grads, *b, |k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |k| g[k] * vb[k]);
                self.accumulate(grads, *b, |k| g[k] * va[k]);
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, |k| g[k] * *s),
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, |k| g[k]),
            Op::AddBias { x, bias, axis } => {
                self.accumulate(grads, *x, |k| g[k]);
                let (outer, len, inner) = split_at_axis(out.shape(), *axis);
                if let Some(slot) = self.slot(grads, *bias) {
                    for o in 0..outer {
                        for (a, s) in slot.iter_mut().enumerate().take(len) {
                            let base = (o * len + a) * inner;
                            *s = *s + g[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::ScaleChannels { x, gate } => {
                let inner: usize = out.shape()[2..].iter().product();
                let gv = self.value(*gate).data();
                self.accumulate(grads, *x, |k| g[k] * gv[k / inner]);
                let xv = self.value(*x).data();
                if let Some(slot) = self.slot(grads, *gate) {
                    for (c, s) in slot.iter_mut().enumerate() {
                        let r = c * inner..(c + 1) * inner;
                        *s = *s + g[r.clone()].iter().zip(&xv[r]).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(slot) = self.slot(grads, *a) {
                    T::gemm(m, n, k, g, (n as isize, 1), vb, (1, n as isize), T::one(), slot);
                }
                if let Some(slot) = self.slot(grads, *b) {
                    T::gemm(k, m, n, va, (1, k as isize), g, (n as isize, 1), T::one(), slot);
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(slot) = self.slot(grads, *a) {
                    for t in 0..bt {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            (n as isize, 1),
                            &vb[t * k * n..(t + 1) * k * n],
                            (1, n as isize),
                            T::one(),
                            &mut slot[t * m * k..(t + 1) * m * k],
                        );
                    }
                }
                if let Some(slot) = self.slot(grads, *b) {
                    for t in 0..bt {
                        T::gemm(
                            k,
                            m,
                            n,
                            &va[t * m * k..(t + 1) * m * k],
                            (1, k as isize),
                            &g[t * m * n..(t + 1) * m * n],
                            (n as isize, 1),
                            T::one(),
                            &mut slot[t * k * n..(t + 1) * k * n],
                        );
                    }
                }
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inverse[p] = d;
                }
                let (_, back) = permute_data(g, out.shape(), &inverse);
                self.accumulate(grads, *x, |k| back[k]);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_at_axis(out.shape(), *axis);
                let mut start = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    self.accumulate(grads, v, |k| {
                        let (o, rest) = (k / (len * inner), k % (len * inner));
                        g[o * total * inner + start * inner + rest]
                    });
                    start += len;
                }
                debug_assert!(outer > 0);
            }
            Op::Narrow { x, axis, start } => {
                let full = self.shape(*x)[*axis];
                let (_, len, inner) = split_at_axis(out.shape(), *axis);
                if let Some(slot) = self.slot(grads, *x) {
                    for (k, &gv) in g.iter().enumerate() {
                        let (o, rest) = (k / (len * inner), k % (len * inner));
                        let dst = o * full * inner + start * inner + rest;
                        slot[dst] = slot[dst] + gv;
                    }
                }
            }
            Op::Sum(x) => self.accumulate(grads, *x, |_| g[0]),
            Op::SumAxis { x, axis } => {
                let (_, len, inner) = split_at_axis(self.shape(*x), *axis);
                self.accumulate(grads, *x, |k| {
                    let (o, i) = (k / (len * inner), k % inner);
                    g[o * inner + i]
                });
            }
            Op::Abs(x) => {
                let v = self.value(*x).data();
                self.accumulate(grads, *x, |k| {
                    let s = if v[k] > T::zero() {
                        T::one()
                    } else if v[k] < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    g[k] * s
                });
            }
            Op::Square(x) => {
                let v = self.value(*x).data();
                let two = T::from_f64_lossy(2.0);
                self.accumulate(grads, *x, |k| g[k] * two * v[k]);
            }
            Op::Gelu(x) => {
                let v = self.value(*x).data();
                self.accumulate(grads, *x, |k| g[k] * gelu_grad(v[k]));
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                self.accumulate(grads, *x, |k| g[k] * y[k] * (T::one() - y[k]));
            }
            Op::Tanh(x) => {
                let y = out.data();
                self.accumulate(grads, *x, |k| g[k] * (T::one() - y[k] * y[k]));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_at_axis(out.shape(), *axis);
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot = (0..len).map(|a| g[at(a)] * y[at(a)]).sum::<T>();
                        for a in 0..len {
                            dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, |k| dx[k]);
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let d = *out.shape().last().unwrap();
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let dn = T::from_usize(d).unwrap();
                let rows = xv.len() / d;
                let xhat = |r: usize, j: usize| {
                    let row = &xv[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<T>() / dn;
                    (row[j] - mean) * rstd[r]
                };
                if let Some(slot) = self.slot(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            slot[j] = slot[j] + g[r * d + j] * xhat(r, j);
                        }
                    }
                }
                if let Some(slot) = self.slot(grads, *beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            slot[j] = slot[j] + g[r * d + j];
                        }
                    }
                }
                if let Some(slot) = self.slot(grads, *x) {
                    let mut xh = vec![T::zero(); d];
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let mean = row.iter().copied().sum::<T>() / dn;
                        for j in 0..d {
                            xh[j] = (row[j] - mean) * rstd[r];
                        }
                        let gh: Vec<T> = (0..d).map(|j| g[r * d + j] * gam[j]).collect();
                        let mean_gh = gh.iter().copied().sum::<T>() / dn;
                        let mean_gh_xh = gh.iter().zip(&xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            slot[r * d + j] = slot[r * d + j] + rstd[r] * (gh[j] - mean_gh - xh[j] * mean_gh_xh);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, p } => {
                let geom = ConvGeom::new(self.shape(*x), self.shape(*w), *p).expect("validated in forward");
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.slot(grads, *x).map(std::mem::take);
                let mut dw = self.slot(grads, *w).map(std::mem::take);
                let mut db = b.and_then(|b| self.slot(grads, b)).map(std::mem::take);
                kernels::conv2d_backward(&geom, xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(v) = dx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = dw {
                    grads[w.0] = Some(v);
                }
                if let (Some(v), Some(b)) = (db, b) {
                    grads[b.0] = Some(v);
                }
            }
            Op::DeformConv { x, offsets, w, b } => {
                let geom = DeformGeom::new(self.shape(*x), self.shape(*offsets), self.shape(*w))
                    .expect("validated in forward");
                let (xv, ov, wv) = (self.value(*x).data(), self.value(*offsets).data(), self.value(*w).data());
                let mut dx = self.slot(grads, *x).map(std::mem::take);
                let mut doff = self.slot(grads, *offsets).map(std::mem::take);
                let mut dw = self.slot(grads, *w).map(std::mem::take);
                let mut db = b.and_then(|b| self.slot(grads, b)).map(std::mem::take);
                kernels::deform_backward(
                    &geom,
                    xv,
                    ov,
                    wv,
                    g,
                    dx.as_deref_mut(),
                    doff.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(v) = dx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = doff {
                    grads[offsets.0] = Some(v);
                }
                if let Some(v) = dw {
                    grads[w.0] = Some(v);
                }
                if let (Some(v), Some(b)) = (db, b) {
                    grads[b.0] = Some(v);
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                self.accumulate(grads, *x, |k| {
                    let (plane, rem) = (k / (h * w), k % (h * w));
                    let (y, xx) = (rem / w, rem % w);
                    let base = plane * 4 * h * w + 2 * y * 2 * w + 2 * xx;
                    g[base] + g[base + 1] + g[base + 2 * w] + g[base + 2 * w + 1]
                });
            }
            Op::AvgPool2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let q = T::from_f64_lossy(0.25);
                self.accumulate(grads, *x, |k| {
                    let (plane, rem) = (k / (h * w), k % (h * w));
                    let (y, xx) = (rem / w, rem % w);
                    g[plane * (h / 2) * (w / 2) + (y / 2) * (w / 2) + xx / 2] * q
                });
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a `requires_grad` leaf; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient matches value shape"))
    }

    pub fn get_slice(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], p: Conv2dParams) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        let (oh, ow) = p.output_size(h, wd, kh, kw).unwrap();
        let mut out = Tensor::zeros(&[n, f, oh, ow]);
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[fi];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * p.stride.0 + ky * p.dilation.0) as isize - p.padding.0 as isize;
                                    let ix = (ox * p.stride.1 + kx * p.dilation.1) as isize - p.padding.1 as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(&[ni, ci, iy as usize, ix as usize]) * w.at(&[fi, ci, ky, kx]);
                                    }
                                }
                            }
                        }
                        let i = ((ni * f + fi) * oh + oy) * ow + ox;
                        out.data_mut()[i] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut r = rng();
        for p in [Conv2dParams::new(1, 1), Conv2dParams::new(2, 1), Conv2dParams::dilated(2, 2), Conv2dParams::new(1, 0)] {
            let x = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut r);
            let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
            let b: Vec<f64> = vec![0.1, -0.2, 0.3, 0.0];
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(Tensor::new(&[4], b.clone()).unwrap()));
            let y = t.conv2d(xv, wv, Some(bv), p).unwrap();
            assert!(t.value(y).max_abs_diff(&naive_conv(&x, &w, &b, p)) < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn matmul_and_bmm_match_naive_products() {
        let mut r = rng();
        let a = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[2, 4, 5], 1.0, &mut r);
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.bmm(av, bv).unwrap();
        for i in 0..2 {
            for m in 0..3 {
                for n in 0..5 {
                    let want: f64 = (0..4).map(|k| a.at(&[i, m, k]) * b.at(&[i, k, n])).sum();
                    assert!((t.value(c).at(&[i, m, n]) - want).abs() < 1e-12);
                }
            }
        }
        let a0 = t.narrow(av, 0, 0, 1).unwrap();
        let a0 = t.reshape(a0, &[3, 4]).unwrap();
        let b0 = t.narrow(bv, 0, 0, 1).unwrap();
        let b0 = t.reshape(b0, &[4, 5]).unwrap();
        let c0 = t.matmul(a0, b0).unwrap();
        let c_first = t.narrow(c, 0, 0, 1).unwrap();
        assert!(t.value(c0).clone().reshape(&[1, 3, 5]).unwrap().max_abs_diff(t.value(c_first)) < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.7).sin() * 50.0));
        let s = t.softmax(x, 2).unwrap();
        for row in t.value(s).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn layer_norm_standardizes_the_last_axis() {
        let mut r = rng();
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::randn(&[3, 8], 3.0, &mut r));
        let g = t.constant(Tensor::ones(&[8]));
        let b = t.constant(Tensor::zeros(&[8]));
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        for row in t.value(y).data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layout_ops_move_elements_as_expected() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = t.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(t.shape(p), [4, 2, 3]);
        assert_eq!(t.value(p).at(&[3, 1, 2]), t.value(x).at(&[1, 2, 3]));
        let n = t.narrow(x, 1, 1, 2).unwrap();
        let rest = t.narrow(x, 1, 0, 1).unwrap();
        let back = t.concat(&[rest, n], 1).unwrap();
        assert_eq!(t.value(back), t.value(x));
        let up = t.upsample2x(x).unwrap();
        assert_eq!(t.shape(up), [2, 6, 8]);
        let down = t.avg_pool2x(up).unwrap();
        assert_eq!(t.value(down), t.value(x));
        let s = t.sum_axis(x, 1).unwrap();
        assert_eq!(t.value(s).at(&[1, 2]), 14.0 + 18.0 + 22.0);
    }

    #[test]
    fn backward_accumulates_over_shared_inputs() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(&[2], vec![1.5, -2.0]).unwrap(), true);
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let l = t.sum(z);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get_slice(x).unwrap(), [4.0, -3.0]);
    }

    #[test]
    fn shape_contract_violations_are_errors() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.add(a, b), Err(crate::Error::Contract { .. })));
        assert!(t.matmul(a, b).is_err());
        assert!(t.permute(a, &[0, 0]).is_err());
        assert!(t.narrow(a, 1, 2, 2).is_err());
        assert!(t.backward(a).is_err());
        let odd = t.constant(Tensor::zeros(&[1, 3, 3]));
        assert!(t.avg_pool2x(odd).is_err());
    }
}
