//! Reference-pair mining: sub-image subdivision, descriptor matching and
//! matched-region cropping, producing a JSON-lines manifest.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::image_io::{load_rgb, save_rgb};
use super::keypoints::{detect_and_describe, DetectorConfig, Keypoint};
use crate::error::{sizing, Error, Result};

/// Sub-image of a source picture, with its offset in source pixels.
#[derive(Clone, Debug)]
pub struct SubImage {
    pub image: RgbImage,
    pub x0: u32,
    pub y0: u32,
}

/// Four quadrants (row-major) followed by the centered crop, each W/2 × H/2.
pub fn subdivide(img: &RgbImage) -> Result<Vec<SubImage>> {
    let (w, h) = img.dimensions();
    if w % 2 != 0 || h % 2 != 0 || w == 0 || h == 0 {
        return sizing("subdivide", format!("image is {w}×{h}; both sides must be even and nonzero"));
    }
    let (sw, sh) = (w / 2, h / 2);
    let origins = [(0, 0), (sw, 0), (0, sh), (sw, sh), (sw / 2, sh / 2)];
    Ok(origins
        .iter()
        .map(|&(x0, y0)| SubImage { image: image::imageops::crop_imm(img, x0, y0, sw, sh).to_image(), x0, y0 })
        .collect())
}

/// How a nearest neighbour is accepted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MatchFilter {
    /// Keep iff `d1 / d2 < ratio`.
    Ratio(f32),
    /// Keep iff `d1 < distance`.
    Absolute(f32),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchConfig {
    pub filter: MatchFilter,
    /// Used when B has fewer than two descriptors.
    pub fallback_distance: f32,
    pub cross_check: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { filter: MatchFilter::Ratio(0.7), fallback_distance: 0.4, cross_check: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub distance: f32,
}

fn distance(p: &[f32], q: &[f32]) -> f32 {
    p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// Two nearest entries of `set` to `q`, ties broken by lower index.
fn two_nearest<D: AsRef<[f32]>>(q: &[f32], set: &[D]) -> (Option<(usize, f32)>, Option<f32>) {
    let (mut best, mut second): (Option<(usize, f32)>, Option<f32>) = (None, None);
    for (j, d) in set.iter().enumerate() {
        let dist = distance(q, d.as_ref());
        match best {
            Some((_, b)) if dist >= b => {
                if second.map_or(true, |s| dist < s) {
                    second = Some(dist);
                }
            }
            _ => {
                second = best.map(|(_, b)| b);
                best = Some((j, dist));
            }
        }
    }
    (best, second)
}

pub fn match_knn<D: AsRef<[f32]>>(a: &[D], b: &[D], cfg: &MatchConfig) -> Vec<Match> {
    let mut out = Vec::new();
    for (i, da) in a.iter().enumerate() {
        let (Some((j, d1)), second) = two_nearest(da.as_ref(), b) else { continue };
        let keep = match (second, cfg.filter) {
            (None, _) => d1 < cfg.fallback_distance,
            (Some(d2), MatchFilter::Ratio(r)) => d1 < r * d2 || (d1 == 0.0 && d2 > 0.0),
            (Some(_), MatchFilter::Absolute(t)) => d1 < t,
        };
        if !keep {
            continue;
        }
        if cfg.cross_check {
            let (back, _) = two_nearest(b[j].as_ref(), a);
            if back.map(|(k, _)| k) != Some(i) {
                continue;
            }
        }
        out.push(Match { a: i, b: j, distance: d1 });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    TooFewMatches { found: usize, required: usize },
    ImageTooSmall { width: u32, height: u32, crop: u32 },
}

impl Rejection {
    pub fn code(&self) -> &'static str {
        match self {
            Self::TooFewMatches { .. } => "too_few_matches",
            Self::ImageTooSmall { .. } => "image_too_small",
        }
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TooFewMatches { found, required } => write!(f, "too_few_matches ({found} < {required})"),
            Self::ImageTooSmall { width, height, crop } => {
                write!(f, "image_too_small ({width}×{height} < {crop}×{crop})")
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct CropPair {
    pub input: RgbImage,
    pub reference: RgbImage,
    pub matches: usize,
    /// Crop centers in the coordinates of the images passed to [`crop_pair`].
    pub center_in: (u32, u32),
    pub center_ref: (u32, u32),
}

/// Top-left corner of a `size` window centered near `c`, kept inside `[0, extent)`.
fn window_origin(c: f64, size: u32, extent: u32) -> u32 {
    (c - size as f64 / 2.0).round().clamp(0.0, (extent - size) as f64) as u32
}

/// Crops `size`×`size` windows centered on the centroid of the matched keypoints in each image.
pub fn crop_pair(
    a: &RgbImage,
    b: &RgbImage,
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    matches: &[Match],
    min_matches: usize,
    size: u32,
) -> std::result::Result<CropPair, Rejection> {
    for img in [a, b] {
        if img.width() < size || img.height() < size {
            return Err(Rejection::ImageTooSmall { width: img.width(), height: img.height(), crop: size });
        }
    }
    if matches.is_empty() || matches.len() < min_matches {
        return Err(Rejection::TooFewMatches { found: matches.len(), required: min_matches.max(1) });
    }
    let n = matches.len() as f64;
    let centroid = |kps: &[Keypoint], pick: fn(&Match) -> usize| {
        let (sx, sy) = matches.iter().fold((0.0, 0.0), |(sx, sy), m| (sx + kps[pick(m)].x, sy + kps[pick(m)].y));
        (sx / n, sy / n)
    };
    let cut = |img: &RgbImage, (cx, cy): (f64, f64)| {
        let x0 = window_origin(cx, size, img.width());
        let y0 = window_origin(cy, size, img.height());
        (image::imageops::crop_imm(img, x0, y0, size, size).to_image(), (x0 + size / 2, y0 + size / 2))
    };
    let (input, center_in) = cut(a, centroid(kps_a, |m| m.a));
    let (reference, center_ref) = cut(b, centroid(kps_b, |m| m.b));
    Ok(CropPair { input, reference, matches: matches.len(), center_in, center_ref })
}

#[derive(Clone, Copy, Debug)]
pub struct MiningConfig {
    pub detector: DetectorConfig,
    pub matching: MatchConfig,
    pub min_matches: usize,
    pub crop_size: u32,
    pub workers: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            matching: MatchConfig { cross_check: true, ..MatchConfig::default() },
            min_matches: 10,
            crop_size: 256,
            workers: 1,
        }
    }
}

/// One accepted pair, in manifest form. Centers are source-image pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePairRecord {
    pub input: String,
    pub reference: String,
    pub source_input: String,
    pub source_reference: String,
    pub sub_image: usize,
    pub matches: usize,
    pub cx_in: u32,
    pub cy_in: u32,
    pub cx_ref: u32,
    pub cy_ref: u32,
}

#[derive(Clone, Debug)]
pub struct MinedPair {
    pub sub_image: usize,
    pub crop: CropPair,
}

/// Matches the k-th sub-image of `a` against the k-th sub-image of `b`.
/// Crop centers are translated back into source coordinates.
pub fn mine_pair(
    a: &RgbImage,
    b: &RgbImage,
    cfg: &MiningConfig,
) -> Result<Vec<(usize, std::result::Result<MinedPair, Rejection>)>> {
    let (subs_a, subs_b) = (subdivide(a)?, subdivide(b)?);
    let mut out = Vec::with_capacity(subs_a.len());
    for (k, (sa, sb)) in subs_a.iter().zip(&subs_b).enumerate() {
        let ka = detect_and_describe(&sa.image, &cfg.detector);
        let kb = detect_and_describe(&sb.image, &cfg.detector);
        let da: Vec<&[f32]> = ka.iter().map(|k| k.descriptor.as_slice()).collect();
        let db: Vec<&[f32]> = kb.iter().map(|k| k.descriptor.as_slice()).collect();
        let matches = match_knn(&da, &db, &cfg.matching);
        let result = crop_pair(&sa.image, &sb.image, &ka, &kb, &matches, cfg.min_matches, cfg.crop_size).map(
            |mut crop| {
                crop.center_in = (crop.center_in.0 + sa.x0, crop.center_in.1 + sa.y0);
                crop.center_ref = (crop.center_ref.0 + sb.x0, crop.center_ref.1 + sb.y0);
                MinedPair { sub_image: k, crop }
            },
        );
        out.push((k, result));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct MiningSummary {
    pub records: Vec<ImagePairRecord>,
    /// `(source name, sub-image, reason)` for every rejected sub-image pair.
    pub rejected: Vec<(String, usize, Rejection)>,
    /// Files present in only one of the two directories.
    pub unpaired: Vec<String>,
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    names.sort();
    Ok(names)
}

struct SourceResult {
    name: String,
    mined: Vec<(usize, std::result::Result<MinedPair, Rejection>)>,
}

/// Pairs files with the same name in `dir_a` and `dir_b`, mines every pair,
/// writes crops under `out/input` and `out/reference` plus `out/manifest.jsonl`.
pub fn mine_directories(dir_a: &Path, dir_b: &Path, out: &Path, cfg: &MiningConfig) -> Result<MiningSummary> {
    let (names_a, names_b) = (png_names(dir_a)?, png_names(dir_b)?);
    let paired: Vec<String> = names_a.iter().filter(|n| names_b.contains(n)).cloned().collect();
    let mut summary = MiningSummary {
        unpaired: names_a.iter().chain(&names_b).filter(|n| !paired.contains(n)).cloned().collect(),
        ..Default::default()
    };
    summary.unpaired.sort();
    summary.unpaired.dedup();

    let workers = cfg.workers.max(1).min(paired.len().max(1));
    let mine_one = |name: &String| -> Result<SourceResult> {
        let a = load_rgb(&dir_a.join(name))?;
        let b = load_rgb(&dir_b.join(name))?;
        Ok(SourceResult { name: name.clone(), mined: mine_pair(&a, &b, cfg)? })
    };
    let mut results: Vec<SourceResult> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let paired = &paired;
                scope.spawn(move || paired.iter().skip(w).step_by(workers).map(mine_one).collect::<Result<Vec<_>>>())
            })
            .collect();
        let mut all = Vec::new();
        for h in handles {
            all.extend(h.join().map_err(|_| Error::Worker("mining worker panicked".into()))??);
        }
        Ok::<_, Error>(all)
    })?;
    results.sort_by(|x, y| x.name.cmp(&y.name));

    std::fs::create_dir_all(out.join("input"))?;
    std::fs::create_dir_all(out.join("reference"))?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(out.join("manifest.jsonl"))?);
    for r in results {
        let stem = Path::new(&r.name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for (k, res) in r.mined {
            match res {
                Ok(pair) => {
                    let file = format!("{stem}_{k}.png");
                    let (input, reference): (PathBuf, PathBuf) =
                        (Path::new("input").join(&file), Path::new("reference").join(&file));
                    save_rgb(&pair.crop.input, &out.join(&input))?;
                    save_rgb(&pair.crop.reference, &out.join(&reference))?;
                    let record = ImagePairRecord {
                        input: input.to_string_lossy().replace('\\', "/"),
                        reference: reference.to_string_lossy().replace('\\', "/"),
                        source_input: r.name.clone(),
                        source_reference: r.name.clone(),
                        sub_image: pair.sub_image,
                        matches: pair.crop.matches,
                        cx_in: pair.crop.center_in.0,
                        cy_in: pair.crop.center_in.1,
                        cx_ref: pair.crop.center_ref.0,
                        cy_ref: pair.crop.center_ref.1,
                    };
                    serde_json::to_writer(&mut manifest, &record)?;
                    manifest.write_all(b"\n")?;
                    summary.records.push(record);
                }
                Err(reason) => summary.rejected.push((r.name.clone(), k, reason)),
            }
        }
    }
    manifest.flush()?;
    Ok(summary)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ImagePairRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn subdivision_geometry() {
        let img = RgbImage::from_fn(512, 512, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x / 256) * 2 + y / 256) as u8]));
        let subs = subdivide(&img).unwrap();
        assert_eq!(subs.len(), 5);
        assert!(subs.iter().all(|s| s.image.dimensions() == (256, 256)));
        assert_eq!((subs[4].x0, subs[4].y0), (128, 128));
        let mut seen = vec![0u8; 512 * 512];
        for s in &subs[..4] {
            for y in 0..256 {
                for x in 0..256 {
                    seen[(s.y0 + y) as usize * 512 + (s.x0 + x) as usize] += 1;
                    assert_eq!(s.image.get_pixel(x, y), img.get_pixel(s.x0 + x, s.y0 + y));
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn degenerate_and_odd_sizes() {
        let subs = subdivide(&RgbImage::new(2, 2)).unwrap();
        assert!(subs.iter().all(|s| s.image.dimensions() == (1, 1)));
        assert!(matches!(subdivide(&RgbImage::new(5, 4)), Err(Error::Sizing { .. })));
    }

    #[test]
    fn ratio_test_cases() {
        let cfg = MatchConfig::default();
        let a = vec![vec![0.0f32, 0.0]];
        let b = vec![vec![0.5f32, 0.0], vec![1.0, 0.0]];
        assert_eq!(match_knn(&a, &b, &cfg).len(), 1);
        let tie = vec![vec![0.5f32, 0.0], vec![-0.5, 0.0]];
        assert!(match_knn(&a, &tie, &cfg).is_empty());
    }

    #[test]
    fn identical_sets_match_themselves() {
        let set: Vec<Vec<f32>> = (0..6).map(|i| (0..4).map(|j| ((i * 4 + j) as f32).sin()).collect()).collect();
        let m = match_knn(&set, &set, &MatchConfig { cross_check: true, ..Default::default() });
        assert_eq!(m.len(), set.len());
        assert!(m.iter().all(|m| m.a == m.b && m.distance == 0.0));
    }

    #[test]
    fn single_candidate_uses_the_absolute_threshold() {
        let cfg = MatchConfig::default();
        let a = vec![vec![0.0f32], vec![1.0]];
        let b = vec![vec![0.1f32]];
        let m = match_knn(&a, &b, &cfg);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].a, 0);
    }

    #[test]
    fn border_centroid_is_clamped_and_no_matches_rejects() {
        let img = RgbImage::new(300, 280);
        let kp = |x, y| Keypoint { x, y, scale: 1.0, orientation: 0.0, descriptor: vec![] };
        let kps = vec![kp(3.0, 275.0)];
        let m = [Match { a: 0, b: 0, distance: 0.0 }];
        let pair = crop_pair(&img, &img, &kps, &kps, &m, 1, 256).unwrap();
        assert_eq!(pair.center_in, (128, 280 - 128));
        assert_eq!(pair.input.dimensions(), (256, 256));
        let err = crop_pair(&img, &img, &kps, &kps, &[], 0, 256).unwrap_err();
        assert_eq!(err.code(), "too_few_matches");
    }

    #[test]
    fn shifted_pair_recovers_the_shift() {
        let scene = crate::data::synth::Scene::new(320, 320, 24, 5);
        let (dx, dy) = (7, -5);
        let a = scene.view(0, 0, 320, 320);
        let b = scene.view(-dx, -dy, 320, 320);
        let cfg = MiningConfig { crop_size: 64, ..Default::default() };
        for (k, res) in mine_pair(&a, &b, &cfg).unwrap() {
            let pair = res.unwrap_or_else(|r| panic!("sub-image {k}: {r}"));
            let ex = pair.crop.center_ref.0 as i64 - pair.crop.center_in.0 as i64;
            let ey = pair.crop.center_ref.1 as i64 - pair.crop.center_in.1 as i64;
            assert!((ex - dx as i64).abs() <= 2 && (ey - dy as i64).abs() <= 2, "sub-image {k}: ({ex}, {ey})");
        }
    }
}
