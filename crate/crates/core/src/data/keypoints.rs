//! Scale-space keypoints: difference-of-Gaussians extrema over three
//! octaves, described by 4×4 cells of 8-bin gradient-orientation histograms.

use image::RgbImage;
use nalgebra::{Matrix3, Vector3};

pub const DESCRIPTOR_LEN: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    /// Sub-pixel position in source-image pixels.
    pub x: f64,
    pub y: f64,
    /// Gaussian scale in source-image pixels.
    pub scale: f64,
    /// Dominant gradient direction in radians. Descriptors are not rotated by it.
    pub orientation: f64,
    pub descriptor: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
pub struct DetectorConfig {
    pub octaves: usize,
    pub scales_per_octave: usize,
    pub base_sigma: f64,
    pub contrast_threshold: f64,
    pub edge_ratio: f64,
    /// Keypoints closer than this to the image edge (source pixels) are dropped.
    pub border: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { octaves: 3, scales_per_octave: 3, base_sigma: 1.6, contrast_threshold: 0.04, edge_ratio: 10.0, border: 8.0 }
    }
}

/// Single-channel float image, row-major.
#[derive(Clone, Debug)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Gray {
    pub fn from_rgb(img: &RgbImage) -> Self {
        let data = img
            .pixels()
            .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
            .collect();
        Self { width: img.width() as usize, height: img.height() as usize, data }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    fn blur(&self, sigma: f64) -> Gray {
        let radius = (3.0 * sigma).ceil().max(1.0) as isize;
        let mut kernel: Vec<f32> =
            (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
        let sum: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);
        let (w, h) = (self.width as isize, self.height as isize);
        let mut tmp = vec![0f32; self.data.len()];
        for y in 0..h {
            let row = &self.data[(y * w) as usize..((y + 1) * w) as usize];
            for x in 0..w {
                let mut acc = 0.0;
                for (k, i) in kernel.iter().zip(-radius..=radius) {
                    acc += k * row[(x + i).clamp(0, w - 1) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let mut out = vec![0f32; self.data.len()];
        for y in 0..h {
            for (k, i) in kernel.iter().zip(-radius..=radius) {
                let src = (y + i).clamp(0, h - 1);
                let src_row = &tmp[(src * w) as usize..((src + 1) * w) as usize];
                let dst = &mut out[(y * w) as usize..((y + 1) * w) as usize];
                for (d, s) in dst.iter_mut().zip(src_row) {
                    *d += k * s;
                }
            }
        }
        Gray { width: self.width, height: self.height, data: out }
    }

    fn half(&self) -> Gray {
        let (w, h) = (self.width / 2, self.height / 2);
        let data = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| self.at(2 * x, 2 * y)).collect();
        Gray { width: w, height: h, data }
    }

    fn diff(&self, other: &Gray) -> Gray {
        let data = other.data.iter().zip(&self.data).map(|(a, b)| a - b).collect();
        Gray { width: self.width, height: self.height, data }
    }
}

struct Octave {
    gauss: Vec<Gray>,
    dog: Vec<Gray>,
}

fn build_pyramid(img: &Gray, cfg: &DetectorConfig) -> Vec<Octave> {
    let s = cfg.scales_per_octave;
    let sigmas: Vec<f64> = (0..s + 3).map(|i| cfg.base_sigma * 2f64.powf(i as f64 / s as f64)).collect();
    let mut base = img.blur((cfg.base_sigma.powi(2) - 0.25).sqrt());
    let mut octaves = Vec::with_capacity(cfg.octaves);
    for _ in 0..cfg.octaves {
        if base.width < 8 || base.height < 8 {
            break;
        }
        let mut gauss = vec![base.clone()];
        for i in 1..s + 3 {
            let inc = (sigmas[i].powi(2) - sigmas[i - 1].powi(2)).sqrt();
            let next = gauss[i - 1].blur(inc);
            gauss.push(next);
        }
        let dog = gauss.windows(2).map(|p| p[0].diff(&p[1])).collect();
        base = gauss[s].half();
        octaves.push(Octave { gauss, dog });
    }
    octaves
}

fn is_extremum(dog: &[Gray], i: usize, x: usize, y: usize) -> bool {
    let v = dog[i].at(x, y);
    let (mut is_max, mut is_min) = (true, true);
    for layer in &dog[i - 1..=i + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                let n = layer.at(xx, yy);
                if std::ptr::eq(layer, &dog[i]) && xx == x && yy == y {
                    continue;
                }
                is_max &= v > n;
                is_min &= v < n;
            }
        }
        if !is_max && !is_min {
            return false;
        }
    }
    is_max || is_min
}

struct Refined {
    layer: usize,
    x: usize,
    y: usize,
    offset: Vector3<f64>,
}

/// Quadratic fit around a DoG extremum; `None` if it drifts out or fails the contrast and edge tests.
fn refine(dog: &[Gray], layer: usize, x: usize, y: usize, cfg: &DetectorConfig) -> Option<Refined> {
    let s = cfg.scales_per_octave;
    let (w, h) = (dog[0].width, dog[0].height);
    let (mut l, mut x, mut y) = (layer, x, y);
    for _ in 0..5 {
        let d = |dl: isize, dx: isize, dy: isize| {
            dog[(l as isize + dl) as usize].at((x as isize + dx) as usize, (y as isize + dy) as usize) as f64
        };
        let v = d(0, 0, 0);
        let g = Vector3::new((d(0, 1, 0) - d(0, -1, 0)) / 2.0, (d(0, 0, 1) - d(0, 0, -1)) / 2.0, (d(1, 0, 0) - d(-1, 0, 0)) / 2.0);
        let dxx = d(0, 1, 0) + d(0, -1, 0) - 2.0 * v;
        let dyy = d(0, 0, 1) + d(0, 0, -1) - 2.0 * v;
        let dss = d(1, 0, 0) + d(-1, 0, 0) - 2.0 * v;
        let dxy = (d(0, 1, 1) - d(0, -1, 1) - d(0, 1, -1) + d(0, -1, -1)) / 4.0;
        let dxs = (d(1, 1, 0) - d(1, -1, 0) - d(-1, 1, 0) + d(-1, -1, 0)) / 4.0;
        let dys = (d(1, 0, 1) - d(1, 0, -1) - d(-1, 0, 1) + d(-1, 0, -1)) / 4.0;
        let hess = Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        let offset = -hess.lu().solve(&g)?;
        if offset.iter().all(|o| o.abs() < 0.5) {
            let contrast = v + 0.5 * g.dot(&offset);
            if contrast.abs() * (s as f64) < cfg.contrast_threshold {
                return None;
            }
            let (tr, det) = (dxx + dyy, dxx * dyy - dxy * dxy);
            let r = cfg.edge_ratio;
            if det <= 0.0 || tr * tr * r >= (r + 1.0).powi(2) * det {
                return None;
            }
            return Some(Refined { layer: l, x, y, offset });
        }
        let step = |p: usize, o: f64| (p as f64 + o.round()) as isize;
        let (nx, ny, nl) = (step(x, offset[0]), step(y, offset[1]), step(l, offset[2]));
        if nl < 1 || nl > s as isize || nx < 1 || ny < 1 || nx >= w as isize - 1 || ny >= h as isize - 1 {
            return None;
        }
        (x, y, l) = (nx as usize, ny as usize, nl as usize);
    }
    None
}

const CELLS: usize = 4;
const BINS: usize = 8;
const CELL_SIGMAS: f64 = 3.0;

fn gradient(img: &Gray, x: usize, y: usize) -> (f64, f64) {
    let gx = img.at(x + 1, y) as f64 - img.at(x - 1, y) as f64;
    let gy = img.at(x, y + 1) as f64 - img.at(x, y - 1) as f64;
    (gx.hypot(gy), gy.atan2(gx))
}

/// Upright descriptor and dominant orientation at `(x, y)` of `img` with in-octave scale `sigma`.
fn describe(img: &Gray, x: f64, y: f64, sigma: f64) -> Option<(Vec<f32>, f64)> {
    use std::f64::consts::TAU;
    let cell = CELL_SIGMAS * sigma;
    let radius = (cell * std::f64::consts::SQRT_2 * (CELLS as f64 + 1.0) / 2.0).round() as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let mut hist = [0f64; CELLS * CELLS * BINS];
    let mut orient = [0f64; 36];
    let window = 2.0 * (CELLS as f64 / 2.0).powi(2);
    for py in (cy - radius).max(1)..=(cy + radius).min(h - 2) {
        for px in (cx - radius).max(1)..=(cx + radius).min(w - 2) {
            let (u, v) = ((px as f64 - x) / cell, (py as f64 - y) / cell);
            let (row, col) = (v + CELLS as f64 / 2.0 - 0.5, u + CELLS as f64 / 2.0 - 0.5);
            if row <= -1.0 || row >= CELLS as f64 || col <= -1.0 || col >= CELLS as f64 {
                continue;
            }
            let (mag, ang) = gradient(img, px as usize, py as usize);
            let ang = ang.rem_euclid(TAU);
            let weight = (-(u * u + v * v) / window).exp() * mag;
            orient[((ang / TAU * 36.0) as usize).min(35)] += weight;
            let obin = ang / TAU * BINS as f64;
            let (r0, c0, o0) = (row.floor(), col.floor(), obin.floor());
            let (dr, dc, dobin) = (row - r0, col - c0, obin - o0);
            for (ri, wr) in [(r0 as isize, 1.0 - dr), (r0 as isize + 1, dr)] {
                if !(0..CELLS as isize).contains(&ri) {
                    continue;
                }
                for (ci, wc) in [(c0 as isize, 1.0 - dc), (c0 as isize + 1, dc)] {
                    if !(0..CELLS as isize).contains(&ci) {
                        continue;
                    }
                    for (oi, wo) in [(o0 as usize % BINS, 1.0 - dobin), ((o0 as usize + 1) % BINS, dobin)] {
                        hist[(ri as usize * CELLS + ci as usize) * BINS + oi] += weight * wr * wc * wo;
                    }
                }
            }
        }
    }
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return None;
    }
    let clip = 0.2 * norm;
    hist.iter_mut().for_each(|v| *v = v.min(clip));
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    let descriptor = hist.iter().map(|v| (v / norm) as f32).collect();
    let peak = (0..36).max_by(|&a, &b| orient[a].total_cmp(&orient[b])).unwrap_or(0);
    Some((descriptor, (peak as f64 + 0.5) / 36.0 * TAU))
}

pub fn detect_and_describe(img: &RgbImage, cfg: &DetectorConfig) -> Vec<Keypoint> {
    detect_gray(&Gray::from_rgb(img), cfg)
}

/// Keypoints sorted by position; deterministic for a fixed input.
pub fn detect_gray(img: &Gray, cfg: &DetectorConfig) -> Vec<Keypoint> {
    let s = cfg.scales_per_octave;
    let prefilter = (0.5 * cfg.contrast_threshold / s as f64) as f32;
    let mut out = Vec::new();
    for (o, oct) in build_pyramid(img, cfg).iter().enumerate() {
        let (w, h) = (oct.dog[0].width, oct.dog[0].height);
        let factor = (1usize << o) as f64;
        for layer in 1..=s {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    if oct.dog[layer].at(x, y).abs() <= prefilter || !is_extremum(&oct.dog, layer, x, y) {
                        continue;
                    }
                    let Some(r) = refine(&oct.dog, layer, x, y, cfg) else { continue };
                    let (kx, ky) = (r.x as f64 + r.offset[0], r.y as f64 + r.offset[1]);
                    let (sx, sy) = (kx * factor, ky * factor);
                    let b = cfg.border;
                    if sx < b || sy < b || sx > (img.width - 1) as f64 - b || sy > (img.height - 1) as f64 - b {
                        continue;
                    }
                    let sigma = cfg.base_sigma * 2f64.powf((r.layer as f64 + r.offset[2]) / s as f64);
                    let Some((descriptor, orientation)) = describe(&oct.gauss[r.layer], kx, ky, sigma) else {
                        continue;
                    };
                    out.push(Keypoint { x: sx, y: sy, scale: sigma * factor, orientation, descriptor });
                }
            }
        }
    }
    out.sort_by(|a, b| (a.y, a.x, a.scale).partial_cmp(&(b.y, b.x, b.scale)).unwrap_or(std::cmp::Ordering::Equal));
    out.dedup_by(|a, b| (a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9 && (a.scale - b.scale).abs() < 1e-9);
    out
}
