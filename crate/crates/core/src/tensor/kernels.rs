//! Forward and backward kernels for the spatial operators.

use super::{Scalar, Tensor};
use crate::error::{contract, Result};

/// Stride, zero padding and dilation of a 2-D convolution, as (vertical, horizontal) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self { stride: (1, 1), padding: (0, 0), dilation: (1, 1) }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride: (stride, stride), padding: (padding, padding), dilation: (1, 1) }
    }

    pub fn dilated(padding: usize, dilation: usize) -> Self {
        Self { stride: (1, 1), padding: (padding, padding), dilation: (dilation, dilation) }
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let ext_h = self.dilation.0 * (kh - 1) + 1;
        let ext_w = self.dilation.1 * (kw - 1) + 1;
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if self.stride.0 == 0 || self.stride.1 == 0 || ph < ext_h || pw < ext_w {
            return None;
        }
        Some(((ph - ext_h) / self.stride.0 + 1, (pw - ext_w) / self.stride.1 + 1))
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub p: Conv2dParams,
}

impl ConvGeom {
    pub fn new(x: &[usize], wt: &[usize], p: Conv2dParams) -> Result<Self> {
        if x.len() != 4 || wt.len() != 4 {
            return contract("conv2d", format!("expected 4-D input and weight, got {x:?} and {wt:?}"));
        }
        if x[1] != wt[1] {
            return contract(
                "conv2d",
                format!("input has {} channels but weight expects {}", x[1], wt[1]),
            );
        }
        let Some((ho, wo)) = p.output_size(x[2], x[3], wt[2], wt[3]) else {
            return contract(
                "conv2d",
                format!("kernel {:?} does not fit padded input {:?} with {p:?}", &wt[2..], &x[2..]),
            );
        };
        Ok(Self { n: x[0], c: x[1], h: x[2], w: x[3], f: wt[0], kh: wt[2], kw: wt[3], ho, wo, p })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let l = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.p.stride.0 + i * g.p.dilation.0) as isize - g.p.padding.0 as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.p.stride.1 + j * g.p.dilation.1) as isize
                            - g.p.padding.1 as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let l = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.p.stride.0 + i * g.p.dilation.0) as isize - g.p.padding.0 as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.p.stride.1 + j * g.p.dilation.1) as isize
                            - g.p.padding.1 as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, l) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); g.n * g.f * l];
    let pointwise = g.p.is_pointwise(g.kh, g.kw);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); rows * l] };
    for n in 0..g.n {
        let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let on = &mut out[n * g.f * l..(n + 1) * g.f * l];
        if let Some(b) = bias {
            for (f, row) in on.chunks_mut(l).enumerate() {
                row.iter_mut().for_each(|v| *v = b[f]);
            }
        }
        let src: &[T] = if pointwise {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(g.f, rows, l, weight, (rows as isize, 1), src, (l as isize, 1), beta, on);
    }
    out
}

/// Gradients of conv2d; each output slot is filled only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (rows, l) = (g.rows(), g.cols());
    let pointwise = g.p.is_pointwise(g.kh, g.kw);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); rows * l] };
    let mut dcols = vec![T::zero(); rows * l];
    let mut dx = dx;
    let mut dw = dw;
    for n in 0..g.n {
        let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let gn = &grad_out[n * g.f * l..(n + 1) * g.f * l];
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[T] = if pointwise {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            // dW[F, rows] += g[F, L] · colsᵀ
            T::gemm(g.f, l, rows, gn, (l as isize, 1), src, (1, l as isize), T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
            if pointwise {
                T::gemm(rows, g.f, l, weight, (1, rows as isize), gn, (l as isize, 1), T::one(), dxn);
            } else {
                T::gemm(rows, g.f, l, weight, (1, rows as isize), gn, (l as isize, 1), T::zero(), &mut dcols);
                col2im(g, &dcols, dxn);
            }
        }
    }
    if let Some(db) = db {
        for n in 0..g.n {
            let gn = &grad_out[n * g.f * l..(n + 1) * g.f * l];
            for (f, row) in gn.chunks(l).enumerate() {
                db[f] = db[f] + row.iter().copied().sum::<T>();
            }
        }
    }
}

/// Bilinear interpolation weights and neighbour indices for one fractional position.
#[derive(Clone, Copy)]
struct Bilinear<T> {
    y0: isize,
    x0: isize,
    ly: T,
    lx: T,
}

impl<T: Scalar> Bilinear<T> {
    fn new(y: T, x: T) -> Self {
        let fy = y.floor();
        let fx = x.floor();
        Self {
            y0: fy.to_isize().unwrap_or(isize::MIN / 2),
            x0: fx.to_isize().unwrap_or(isize::MIN / 2),
            ly: y - fy,
            lx: x - fx,
        }
    }

    #[inline]
    fn fetch(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            T::zero()
        } else {
            plane[y as usize * w + x as usize]
        }
    }

    /// Corner values (v00, v01, v10, v11) with zero padding.
    #[inline]
    fn corners(&self, plane: &[T], h: usize, w: usize) -> [T; 4] {
        [
            Self::fetch(plane, h, w, self.y0, self.x0),
            Self::fetch(plane, h, w, self.y0, self.x0 + 1),
            Self::fetch(plane, h, w, self.y0 + 1, self.x0),
            Self::fetch(plane, h, w, self.y0 + 1, self.x0 + 1),
        ]
    }

    #[inline]
    fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.ly) * (one - self.lx),
            (one - self.ly) * self.lx,
            self.ly * (one - self.lx),
            self.ly * self.lx,
        ]
    }

    #[inline]
    fn sample(&self, plane: &[T], h: usize, w: usize) -> T {
        let v = self.corners(plane, h, w);
        let wt = self.weights();
        v[0] * wt[0] + v[1] * wt[1] + v[2] * wt[2] + v[3] * wt[3]
    }

    /// Partial derivatives of the sample with respect to (y, x).
    #[inline]
    fn grad_pos(&self, plane: &[T], h: usize, w: usize) -> (T, T) {
        let [v00, v01, v10, v11] = self.corners(plane, h, w);
        let one = T::one();
        let dy = (one - self.lx) * (v10 - v00) + self.lx * (v11 - v01);
        let dx = (one - self.ly) * (v01 - v00) + self.ly * (v11 - v10);
        (dy, dx)
    }

    #[inline]
    fn scatter(&self, plane: &mut [T], h: usize, w: usize, g: T) {
        let wt = self.weights();
        let pts = [
            (self.y0, self.x0),
            (self.y0, self.x0 + 1),
            (self.y0 + 1, self.x0),
            (self.y0 + 1, self.x0 + 1),
        ];
        for ((y, x), wv) in pts.into_iter().zip(wt) {
            if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                let i = y as usize * w + x as usize;
                plane[i] = plane[i] + g * wv;
            }
        }
    }
}

/// Samples every channel of a `[C, H, W]` tensor at fractional `(y, x)`.
/// Neighbours outside the grid read as zero.
pub fn bilinear_sample<T: Scalar>(input: &Tensor<T>, y: T, x: T) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 3 {
        return contract("bilinear_sample", format!("expected [C,H,W], got {s:?}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let b = Bilinear::new(y, x);
    let out = input.data().chunks(h * w).map(|plane| b.sample(plane, h, w)).collect();
    Tensor::new(&[c], out)
}

pub(crate) struct DeformGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
}

impl DeformGeom {
    pub fn new(x: &[usize], offsets: &[usize], wt: &[usize]) -> Result<Self> {
        if x.len() != 4 || offsets.len() != 4 || wt.len() != 4 {
            return contract("deformable_conv", "expected 4-D input, offsets and weight");
        }
        let k = wt[2];
        if wt[3] != k || k % 2 == 0 {
            return contract("deformable_conv", format!("kernel must be square and odd, got {wt:?}"));
        }
        if wt[1] != x[1] {
            return contract(
                "deformable_conv",
                format!("input has {} channels but weight expects {}", x[1], wt[1]),
            );
        }
        let expect = [x[0], 2 * k * k, x[2], x[3]];
        if offsets != expect {
            return contract(
                "deformable_conv",
                format!("offsets must be shaped {expect:?}, got {offsets:?}"),
            );
        }
        Ok(Self { n: x[0], c: x[1], h: x[2], w: x[3], f: wt[0], k })
    }

    fn taps(&self) -> usize {
        self.k * self.k
    }

    /// Sampling position of tap `t` for output pixel `(oy, ox)` given offset planes.
    fn position<T: Scalar>(&self, off: &[T], t: usize, oy: usize, ox: usize) -> Bilinear<T> {
        let hw = self.h * self.w;
        let r = (self.k / 2) as isize;
        let (i, j) = ((t / self.k) as isize, (t % self.k) as isize);
        let pix = oy * self.w + ox;
        let dy = off[2 * t * hw + pix];
        let dx = off[(2 * t + 1) * hw + pix];
        let y = T::from_isize(oy as isize + i - r).unwrap() + dy;
        let x = T::from_isize(ox as isize + j - r).unwrap() + dx;
        Bilinear::new(y, x)
    }

    fn fill_cols<T: Scalar>(&self, xn: &[T], off: &[T], cols: &mut [T]) {
        let (hw, kk) = (self.h * self.w, self.taps());
        for t in 0..kk {
            for oy in 0..self.h {
                for ox in 0..self.w {
                    let b = self.position(off, t, oy, ox);
                    let pix = oy * self.w + ox;
                    for c in 0..self.c {
                        let plane = &xn[c * hw..(c + 1) * hw];
                        cols[(c * kk + t) * hw + pix] = b.sample(plane, self.h, self.w);
                    }
                }
            }
        }
    }
}

pub(crate) fn deform_forward<T: Scalar>(
    g: &DeformGeom,
    x: &[T],
    offsets: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (hw, kk) = (g.h * g.w, g.taps());
    let rows = g.c * kk;
    let mut cols = vec![T::zero(); rows * hw];
    let mut out = vec![T::zero(); g.n * g.f * hw];
    for n in 0..g.n {
        let xn = &x[n * g.c * hw..(n + 1) * g.c * hw];
        let on_off = &offsets[n * 2 * kk * hw..(n + 1) * 2 * kk * hw];
        g.fill_cols(xn, on_off, &mut cols);
        let on = &mut out[n * g.f * hw..(n + 1) * g.f * hw];
        if let Some(b) = bias {
            for (f, row) in on.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = b[f]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(g.f, rows, hw, weight, (rows as isize, 1), &cols, (hw as isize, 1), beta, on);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deform_backward<T: Scalar>(
    g: &DeformGeom,
    x: &[T],
    offsets: &[T],
    weight: &[T],
    grad_out: &[T],
    mut dx: Option<&mut [T]>,
    mut doff: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (hw, kk) = (g.h * g.w, g.taps());
    let rows = g.c * kk;
    let mut cols = vec![T::zero(); rows * hw];
    let mut dcols = vec![T::zero(); rows * hw];
    for n in 0..g.n {
        let xn = &x[n * g.c * hw..(n + 1) * g.c * hw];
        let off_n = &offsets[n * 2 * kk * hw..(n + 1) * 2 * kk * hw];
        let gn = &grad_out[n * g.f * hw..(n + 1) * g.f * hw];
        if let Some(dw) = dw.as_deref_mut() {
            g.fill_cols(xn, off_n, &mut cols);
            T::gemm(g.f, hw, rows, gn, (hw as isize, 1), &cols, (1, hw as isize), T::one(), dw);
        }
        if dx.is_none() && doff.is_none() {
            continue;
        }
        T::gemm(rows, g.f, hw, weight, (1, rows as isize), gn, (hw as isize, 1), T::zero(), &mut dcols);
        for t in 0..kk {
            for oy in 0..g.h {
                for ox in 0..g.w {
                    let b = g.position(off_n, t, oy, ox);
                    let pix = oy * g.w + ox;
                    let (mut gy, mut gx) = (T::zero(), T::zero());
                    for c in 0..g.c {
                        let gcol = dcols[(c * kk + t) * hw + pix];
                        if gcol == T::zero() {
                            continue;
                        }
                        let plane = &xn[c * hw..(c + 1) * hw];
                        if doff.is_some() {
                            let (py, px) = b.grad_pos(plane, g.h, g.w);
                            gy = gy + gcol * py;
                            gx = gx + gcol * px;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let dplane = &mut dx[n * g.c * hw + c * hw..n * g.c * hw + (c + 1) * hw];
                            b.scatter(dplane, g.h, g.w, gcol);
                        }
                    }
                    if let Some(doff) = doff.as_deref_mut() {
                        let base = n * 2 * kk * hw;
                        doff[base + 2 * t * hw + pix] = doff[base + 2 * t * hw + pix] + gy;
                        doff[base + (2 * t + 1) * hw + pix] = doff[base + (2 * t + 1) * hw + pix] + gx;
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for n in 0..g.n {
            let gn = &grad_out[n * g.f * hw..(n + 1) * g.f * hw];
            for (f, row) in gn.chunks(hw).enumerate() {
                db[f] = db[f] + row.iter().copied().sum::<T>();
            }
        }
    }
}
