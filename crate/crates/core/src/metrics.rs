//! Image quality metrics and the ratio-stratified evaluation report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Serialize, Serializer};

use crate::data::image_io::{load_gray, load_rgb, rgb_to_tensor};
use crate::data::mask::{classify_mask_ratio, Mask, RatioBin};
use crate::error::{contract, Error, Result};
use crate::losses::FeatureExtractor;
use crate::tensor::{Tape, Tensor};

/// `10·log10(max² / MSE)`; `+∞` when the inputs are identical.
pub fn psnr(x: &[f64], y: &[f64], max_value: f64) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return contract("psnr", format!("lengths {} and {} differ or are zero", x.len(), y.len()));
    }
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// PSNR over all channels of two 8-bit images (max 255).
pub fn psnr_rgb(x: &RgbImage, y: &RgbImage) -> Result<f64> {
    if x.dimensions() != y.dimensions() {
        return contract("psnr", format!("sizes {:?} and {:?} differ", x.dimensions(), y.dimensions()));
    }
    let f = |i: &RgbImage| i.as_raw().iter().map(|&v| v as f64).collect::<Vec<_>>();
    psnr(&f(x), &f(y), 255.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub max_value: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, max_value: 255.0 }
    }
}

fn gaussian_window(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..len).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filter.
fn filter_valid(img: &[f64], width: usize, height: usize, wx: &[f64], wy: &[f64]) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (width - wx.len() + 1, height - wy.len() + 1);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        let src = &img[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = wx.iter().zip(&src[x..]).map(|(k, v)| k * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (k, wk) in wy.iter().enumerate() {
            let src = &rows[(y + k) * ow..(y + k + 1) * ow];
            for (o, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += wk * s;
            }
        }
    }
    (out, ow, oh)
}

/// Mean SSIM map of two single-channel images. The window shrinks to the
/// image along any axis shorter than `cfg.window`.
pub fn ssim(x: &[f64], y: &[f64], width: usize, height: usize, cfg: &SsimConfig) -> Result<f64> {
    if x.len() != width * height || y.len() != width * height || x.is_empty() {
        return contract("ssim", format!("buffers of {} and {} values for a {width}×{height} image", x.len(), y.len()));
    }
    let wx = gaussian_window(cfg.window.min(width), cfg.sigma);
    let wy = gaussian_window(cfg.window.min(height), cfg.sigma);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mx, ow, oh) = filter_valid(x, width, height, &wx, &wy);
    let (my, ..) = filter_valid(y, width, height, &wx, &wy);
    let (sxx, ..) = filter_valid(&prod(x, x), width, height, &wx, &wy);
    let (syy, ..) = filter_valid(&prod(y, y), width, height, &wx, &wy);
    let (sxy, ..) = filter_valid(&prod(x, y), width, height, &wx, &wy);
    let c1 = (cfg.k1 * cfg.max_value).powi(2);
    let c2 = (cfg.k2 * cfg.max_value).powi(2);
    let total: f64 = (0..ow * oh)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cxy) = (sxx[i] - ux * ux, syy[i] - uy * uy, sxy[i] - ux * uy);
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / (ow * oh) as f64)
}

pub fn luminance(img: &RgbImage) -> Vec<f64> {
    img.pixels().map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
}

/// SSIM on the luminance of two 8-bit images.
pub fn ssim_rgb(x: &RgbImage, y: &RgbImage) -> Result<f64> {
    if x.dimensions() != y.dimensions() {
        return contract("ssim", format!("sizes {:?} and {:?} differ", x.dimensions(), y.dimensions()));
    }
    ssim(&luminance(x), &luminance(y), x.width() as usize, x.height() as usize, &SsimConfig::default())
}

/// Eigenvalues below this (relative to the largest magnitude) are an error; above it they clip to zero.
const PSD_TOLERANCE: f64 = 1e-8;

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -PSD_TOLERANCE * scale {
            return Err(Error::NotPsd(*v));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `Tr((Σ₁Σ₂)^{1/2})` through the symmetric product `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`.
fn trace_sqrt_product(c1: &DMatrix<f64>, c2: &DMatrix<f64>) -> Result<f64> {
    let r = psd_sqrt(c1)?;
    Ok(psd_sqrt(&(&r * c2 * &r))?.trace())
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, evaluated in both argument orders and averaged.
pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return contract("frechet_distance", format!("dimension mismatch: {d}, {}, {:?}, {:?}", mu2.len(), cov1.shape(), cov2.shape()));
    }
    for c in [cov1, cov2] {
        let scale = c.amax().max(1.0);
        if (c - c.transpose()).amax() > 1e-9 * scale {
            return contract("frechet_distance", "covariance is not symmetric");
        }
    }
    let cross = 0.5 * (trace_sqrt_product(cov1, cov2)? + trace_sqrt_product(cov2, cov1)?);
    let value = (mu1 - mu2).norm_squared() + cov1.trace() + cov2.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Mean and unbiased covariance of row samples (zero covariance for fewer than two).
pub fn gaussian_stats(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let Some(first) = samples.first() else {
        return contract("gaussian_stats", "no samples");
    };
    let d = first.len();
    if samples.iter().any(|s| s.len() != d) {
        return contract("gaussian_stats", "samples differ in dimension");
    }
    let n = samples.len();
    let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = if n > 1 { centered.transpose() * &centered / (n - 1) as f64 } else { DMatrix::zeros(d, d) };
    Ok((mu, cov))
}

/// Spatially pooled final-stage features of one image.
pub fn embed<E: FeatureExtractor<f32>>(extractor: &E, img: &RgbImage) -> Result<Vec<f64>> {
    let t = rgb_to_tensor::<f32>(img);
    let shape = [1, 3, t.shape()[1], t.shape()[2]];
    let mut tape = Tape::new();
    let x = tape.constant(t.reshape(&shape)?);
    let stages = extractor.extract(&mut tape, x)?;
    let last = *stages.last().ok_or_else(|| Error::Contract { op: "embed", detail: "extractor has no stages".into() })?;
    let f: &Tensor<f32> = tape.value(last);
    let (c, hw) = (f.shape()[1], f.shape()[2] * f.shape()[3]);
    Ok((0..c).map(|ch| f.data()[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64).collect())
}

fn ser_metric<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_nan() {
        s.serialize_none()
    } else if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

/// Formats a metric the way the CSV and text tables print it.
pub fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub filename: String,
    pub bin: String,
    #[serde(serialize_with = "ser_metric")]
    pub psnr: f64,
    #[serde(serialize_with = "ser_metric")]
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinMetrics {
    pub label: String,
    pub count: usize,
    pub empty: bool,
    #[serde(serialize_with = "ser_metric")]
    pub psnr: f64,
    #[serde(serialize_with = "ser_metric")]
    pub ssim: f64,
    #[serde(serialize_with = "ser_metric")]
    pub fd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetadata {
    pub pred_dir: PathBuf,
    pub gt_dir: PathBuf,
    pub mask_dir: PathBuf,
    pub embedding: String,
    pub evaluated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub bins: Vec<BinMetrics>,
    pub average: BinMetrics,
    pub metadata: RunMetadata,
    /// Files that were listed but excluded, with the reason.
    pub excluded: Vec<(String, String)>,
}

impl EvalReport {
    /// Nonzero when any file was excluded.
    pub fn warning_status(&self) -> i32 {
        i32::from(!self.excluded.is_empty())
    }

    pub fn to_text(&self) -> String {
        let mut cols: Vec<&BinMetrics> = self.bins.iter().collect();
        cols.push(&self.average);
        let mut s = String::new();
        let _ = write!(s, "{:<16}", "Metric");
        for c in &cols {
            let _ = write!(s, "{:>12}", c.label);
        }
        s.push('\n');
        let rows: [(&str, fn(&BinMetrics) -> String); 4] = [
            ("PSNR", |b| fmt_fixed(b.psnr, 2)),
            ("SSIM", |b| fmt_fixed(b.ssim, 4)),
            ("FD (pluggable)", |b| fmt_fixed(b.fd, 4)),
            ("Images", |b| b.count.to_string()),
        ];
        for (name, f) in rows {
            let _ = write!(s, "{name:<16}");
            for c in &cols {
                let _ = write!(s, "{:>12}", f(c));
            }
            s.push('\n');
        }
        for (file, reason) in &self.excluded {
            let _ = writeln!(s, "warning: excluded {file}: {reason}");
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn fmt_fixed(v: f64, digits: usize) -> String {
    if v.is_finite() {
        format!("{v:.digits$}")
    } else {
        fmt_metric(v)
    }
}

pub fn scores_to_csv(scores: &[ImageScore]) -> String {
    let mut s = String::from("filename,bin,psnr,ssim\n");
    for r in scores {
        let _ = writeln!(s, "{},{},{},{}", r.filename, r.bin, fmt_metric(r.psnr), fmt_metric(r.ssim));
    }
    s
}

#[derive(Clone, Debug)]
pub struct EvalRun {
    pub report: EvalReport,
    pub scores: Vec<ImageScore>,
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut v: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    v.sort();
    Ok(v)
}

struct Scored {
    score: ImageScore,
    bin: RatioBin,
    pred_embedding: Vec<f64>,
    gt_embedding: Vec<f64>,
}

fn score_one<E: FeatureExtractor<f32>>(
    name: &str,
    pred_dir: &Path,
    gt_dir: &Path,
    mask_dir: &Path,
    extractor: &E,
) -> std::result::Result<Scored, String> {
    let pred = load_rgb(&pred_dir.join(name)).map_err(|e| e.to_string())?;
    let gt = load_rgb(&gt_dir.join(name)).map_err(|e| e.to_string())?;
    let gray = load_gray(&mask_dir.join(name)).map_err(|e| e.to_string())?;
    let mask = Mask {
        width: gray.width() as usize,
        height: gray.height() as usize,
        bits: gray.as_raw().iter().map(|&v| u8::from(v > 127)).collect(),
    };
    let bin = classify_mask_ratio(&mask).map_err(|e| e.to_string())?;
    let score = ImageScore {
        filename: name.to_string(),
        bin: bin.to_string(),
        psnr: psnr_rgb(&pred, &gt).map_err(|e| e.to_string())?,
        ssim: ssim_rgb(&pred, &gt).map_err(|e| e.to_string())?,
    };
    let pred_embedding = embed(extractor, &pred).map_err(|e| e.to_string())?;
    let gt_embedding = embed(extractor, &gt).map_err(|e| e.to_string())?;
    Ok(Scored { score, bin, pred_embedding, gt_embedding })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

/// Scores every filename present in all three directories, grouped by mask ratio bin.
pub fn evaluate_run<E: FeatureExtractor<f32> + Sync>(
    pred_dir: &Path,
    gt_dir: &Path,
    mask_dir: &Path,
    extractor: &E,
    workers: usize,
) -> Result<EvalRun> {
    let (p, g, m) = (png_names(pred_dir)?, png_names(gt_dir)?, png_names(mask_dir)?);
    let mut all: Vec<&String> = p.iter().chain(&g).chain(&m).collect();
    all.sort();
    all.dedup();
    let mut excluded = Vec::new();
    let mut aligned = Vec::new();
    for name in all {
        let missing: Vec<&str> = [(&p, "prediction"), (&g, "ground truth"), (&m, "mask")]
            .iter()
            .filter(|(set, _)| !set.contains(name))
            .map(|(_, what)| *what)
            .collect();
        if missing.is_empty() {
            aligned.push(name.clone());
        } else {
            excluded.push((name.clone(), format!("orphan, missing {}", missing.join(", "))));
        }
    }

    let workers = workers.max(1).min(aligned.len().max(1));
    let results: Vec<(usize, std::result::Result<Scored, String>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let aligned = &aligned;
                scope.spawn(move || {
                    (w..aligned.len())
                        .step_by(workers)
                        .map(|i| (i, score_one(&aligned[i], pred_dir, gt_dir, mask_dir, extractor)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all = Vec::new();
        for h in handles {
            all.extend(h.join().map_err(|_| Error::Worker("evaluation worker panicked".into()))?);
        }
        Ok::<_, Error>(all)
    })?;
    let mut results = results;
    results.sort_by_key(|(i, _)| *i);

    let mut scored = Vec::new();
    for (i, r) in results {
        match r {
            Ok(s) => scored.push(s),
            Err(reason) => excluded.push((aligned[i].clone(), reason)),
        }
    }
    excluded.sort();

    let mut bins = Vec::with_capacity(RatioBin::COUNT);
    for bin in RatioBin::all() {
        let members: Vec<&Scored> = scored.iter().filter(|s| s.bin == bin).collect();
        let fd = if members.is_empty() {
            f64::NAN
        } else {
            let pe: Vec<Vec<f64>> = members.iter().map(|s| s.pred_embedding.clone()).collect();
            let ge: Vec<Vec<f64>> = members.iter().map(|s| s.gt_embedding.clone()).collect();
            let (m1, c1) = gaussian_stats(&pe)?;
            let (m2, c2) = gaussian_stats(&ge)?;
            frechet_distance(&m1, &c1, &m2, &c2)?
        };
        bins.push(BinMetrics {
            label: bin.to_string(),
            count: members.len(),
            empty: members.is_empty(),
            psnr: mean(members.iter().map(|s| s.score.psnr)),
            ssim: mean(members.iter().map(|s| s.score.ssim)),
            fd,
        });
    }
    let total: usize = bins.iter().map(|b| b.count).sum();
    let weighted = |f: fn(&BinMetrics) -> f64| {
        bins.iter().filter(|b| !b.empty).map(|b| b.count as f64 * f(b)).sum::<f64>() / total as f64
    };
    let average = BinMetrics {
        label: "Average".into(),
        count: total,
        empty: total == 0,
        psnr: weighted(|b| b.psnr),
        ssim: weighted(|b| b.ssim),
        fd: weighted(|b| b.fd),
    };
    let report = EvalReport {
        bins,
        average,
        metadata: RunMetadata {
            pred_dir: pred_dir.to_path_buf(),
            gt_dir: gt_dir.to_path_buf(),
            mask_dir: mask_dir.to_path_buf(),
            embedding: std::any::type_name::<E>().rsplit("::").next().unwrap_or_default().to_string(),
            evaluated: total,
        },
        excluded,
    };
    Ok(EvalRun { report, scores: scored.into_iter().map(|s| s.score).collect() })
}
