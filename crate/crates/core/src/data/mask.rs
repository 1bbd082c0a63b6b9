//! Irregular free-form masks stratified into six hole-ratio bins.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Hole-ratio bin `[k/10, (k+1)/10)` for `k` in `0..6`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RatioBin(u8);

impl RatioBin {
    pub const COUNT: usize = 6;

    pub fn new(index: usize) -> Option<Self> {
        (index < Self::COUNT).then_some(Self(index as u8))
    }

    pub fn all() -> impl Iterator<Item = RatioBin> {
        (0..Self::COUNT as u8).map(RatioBin)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn lower(self) -> f64 {
        self.0 as f64 / 10.0
    }

    pub fn upper(self) -> f64 {
        (self.0 + 1) as f64 / 10.0
    }

    /// Directory-safe name such as `20-30`.
    pub fn dir_name(self) -> String {
        format!("{}-{}", self.0 as u32 * 10, (self.0 as u32 + 1) * 10)
    }

    pub fn from_dir_name(name: &str) -> Option<Self> {
        Self::all().find(|b| b.dir_name() == name || format!("{}%", b.dir_name()) == name)
    }

    /// Bin of `holes` missing pixels out of `total`, using exact integer arithmetic.
    pub fn of_count(holes: usize, total: usize) -> Result<Self> {
        let k = (10 * holes) / total;
        Self::new(k).ok_or(Error::OutOfProtocol(holes as f64 / total as f64))
    }
}

impl fmt::Display for RatioBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}%", self.dir_name())
    }
}

/// Binary mask, 1 = missing, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<u8>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![0; width * height] }
    }

    pub fn holes(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn ratio(&self) -> f64 {
        self.holes() as f64 / self.bits.len() as f64
    }

    pub fn touches_boundary(&self) -> bool {
        let (w, h) = (self.width, self.height);
        (0..w).any(|x| self.bits[x] != 0 || self.bits[(h - 1) * w + x] != 0)
            || (0..h).any(|y| self.bits[y * w] != 0 || self.bits[y * w + w - 1] != 0)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, self.height, self.width], |i| if self.bits[i] != 0 { T::one() } else { T::zero() })
    }

    /// Accepts only exact 0/1 values.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => return contract("mask", format!("expected a single-channel mask, got {s:?}")),
        };
        let mut bits = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v == T::zero() {
                bits.push(0);
            } else if v == T::one() {
                bits.push(1);
            } else {
                return contract("classify_mask_ratio", format!("non-binary mask value {v:?}"));
            }
        }
        Ok(Self { width: w, height: h, bits })
    }
}

/// A generated mask with its protocol labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub mask: Mask,
    pub ratio_bin: RatioBin,
    pub damaged_boundary: bool,
}

pub fn classify_mask_ratio(mask: &Mask) -> Result<RatioBin> {
    if mask.bits.iter().any(|&b| b > 1) {
        return contract("classify_mask_ratio", "mask values must be 0 or 1");
    }
    RatioBin::of_count(mask.holes(), mask.bits.len())
}

/// `I ⊙ (1 − M)` for an image `[C,H,W]` or `[N,C,H,W]` and a mask whose
/// spatial size matches (`[H,W]`, `[1,H,W]` or `[N,1,H,W]`).
pub fn apply_mask<T: Scalar>(image: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    let (n, c, h, w) = match s {
        [c, h, w] => (1, *c, *h, *w),
        [n, c, h, w] => (*n, *c, *h, *w),
        _ => return contract("apply_mask", format!("expected [C,H,W] or [N,C,H,W] image, got {s:?}")),
    };
    let ms = mask.shape();
    let per_batch = match ms {
        [mh, mw] | [1, mh, mw] if (*mh, *mw) == (h, w) => false,
        [mn, 1, mh, mw] if (*mn, *mh, *mw) == (n, h, w) => true,
        _ => return contract("apply_mask", format!("mask {ms:?} does not match image {s:?}")),
    };
    let m = mask.data();
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (b, pix) = (i / (c * h * w), i % (h * w));
        let mv = if per_batch { m[b * h * w + pix] } else { m[pix] };
        *v = *v * (T::one() - mv);
    }
    Ok(out)
}

/// Parameters of the stroke generator.
#[derive(Clone, Copy, Debug)]
pub struct StrokeParams {
    pub max_vertices: usize,
    pub max_radius: f64,
    pub max_segment: f64,
}

impl StrokeParams {
    fn for_size(width: usize, height: usize) -> Self {
        let side = width.min(height) as f64;
        Self { max_vertices: 10, max_radius: (side / 14.0).max(1.5), max_segment: side / 5.0 }
    }

    fn shrink(&mut self) {
        self.max_vertices = (self.max_vertices * 3 / 4).max(1);
        self.max_radius = (self.max_radius * 0.8).max(0.75);
        self.max_segment = (self.max_segment * 0.8).max(2.0);
    }
}

struct Canvas {
    mask: Mask,
    holes: usize,
    /// Pixels within this many rows/columns of the border stay known.
    guard: usize,
}

impl Canvas {
    /// Paints a disc, recording newly set pixels.
    fn disc(&mut self, cy: f64, cx: f64, r: f64, painted: &mut Vec<usize>) {
        let (w, h) = (self.mask.width as isize, self.mask.height as isize);
        let g = self.guard as isize;
        let (y0, y1) = ((cy - r).floor() as isize, (cy + r).ceil() as isize);
        let (x0, x1) = ((cx - r).floor() as isize, (cx + r).ceil() as isize);
        for y in y0.max(g)..=y1.min(h - 1 - g) {
            for x in x0.max(g)..=x1.min(w - 1 - g) {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                if dy * dy + dx * dx <= r * r {
                    let i = (y * w + x) as usize;
                    if self.mask.bits[i] == 0 {
                        self.mask.bits[i] = 1;
                        self.holes += 1;
                        painted.push(i);
                    }
                }
            }
        }
    }

    fn undo(&mut self, painted: &[usize]) {
        for &i in painted {
            self.mask.bits[i] = 0;
        }
        self.holes -= painted.len();
    }

    /// Random walk with a brush of random thickness. Returns painted pixels.
    fn stroke<R: Rng>(&mut self, rng: &mut R, p: StrokeParams, from_border: bool) -> Vec<usize> {
        let (w, h) = (self.mask.width as f64, self.mask.height as f64);
        let (mut y, mut x) = if from_border {
            match rng.gen_range(0..4) {
                0 => (0.0, rng.gen_range(0.0..w)),
                1 => (h - 1.0, rng.gen_range(0.0..w)),
                2 => (rng.gen_range(0.0..h), 0.0),
                _ => (rng.gen_range(0.0..h), w - 1.0),
            }
        } else {
            (rng.gen_range(0.0..h), rng.gen_range(0.0..w))
        };
        let mut angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let vertices = rng.gen_range(1..=p.max_vertices);
        let mut painted = Vec::new();
        for _ in 0..vertices {
            let radius = rng.gen_range(0.5..=1.0) * p.max_radius;
            let length = rng.gen_range(0.3..=1.0) * p.max_segment;
            angle += rng.gen_range(-1.2..1.2);
            let (ny, nx) = (
                (y + length * angle.sin()).clamp(0.0, h - 1.0),
                (x + length * angle.cos()).clamp(0.0, w - 1.0),
            );
            let steps = (length.ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                self.disc(y + (ny - y) * t, x + (nx - x) * t, radius, &mut painted);
            }
            y = ny;
            x = nx;
        }
        painted
    }
}

const MAX_RESTARTS: usize = 20;
const MAX_OVERSHOOTS: usize = 40;

/// Draws strokes until the hole ratio lands in `bin`. With
/// `damaged_boundary` at least one stroke starts on the image border;
/// otherwise a border band stays known. Deterministic per seed.
pub fn gen_irregular_mask(
    bin: RatioBin,
    damaged_boundary: bool,
    seed: u64,
    width: usize,
    height: usize,
) -> Result<MaskSpec> {
    if width < 8 || height < 8 {
        return contract("gen_irregular_mask", format!("mask {width}×{height} is too small"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = width * height;
    let guard = if damaged_boundary { 0 } else { (width.min(height) / 64).max(1) };
    let upper = |holes: usize| 10 * holes >= (bin.index() + 1) * total;
    for _ in 0..MAX_RESTARTS {
        let span = bin.upper() - bin.lower();
        let target = rng.gen_range(bin.lower() + 0.1 * span..bin.upper() - 0.1 * span);
        let target_holes = ((target * total as f64).ceil() as usize).max(1);
        let mut canvas = Canvas { mask: Mask::zeros(width, height), holes: 0, guard };
        let mut params = StrokeParams::for_size(width, height);
        let mut overshoots = 0;
        let mut first = true;
        while canvas.holes < target_holes && overshoots < MAX_OVERSHOOTS {
            let painted = canvas.stroke(&mut rng, params, damaged_boundary && first);
            if upper(canvas.holes) {
                canvas.undo(&painted);
                overshoots += 1;
                params.shrink();
            } else if !painted.is_empty() {
                first = false;
            }
        }
        let holes = canvas.holes;
        let ok = holes >= target_holes
            && !upper(holes)
            && canvas.mask.touches_boundary() == damaged_boundary;
        if ok {
            let ratio_bin = classify_mask_ratio(&canvas.mask)?;
            debug_assert_eq!(ratio_bin, bin);
            return Ok(MaskSpec { mask: canvas.mask, ratio_bin, damaged_boundary });
        }
    }
    Err(Error::MaskGeneration(format!(
        "no {}×{} mask in bin {bin} (damaged_boundary = {damaged_boundary}) after {MAX_RESTARTS} restarts",
        width, height
    )))
}

/// Seed of mask `index` in `bin` for a corpus seeded with `seed`.
pub fn corpus_seed(seed: u64, bin: RatioBin, index: usize) -> u64 {
    // SplitMix64 finalizer over the packed coordinates.
    let mut z = seed ^ ((bin.index() as u64) << 56) ^ index as u64;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `per_bin` masks for each bin; even indices have damaged boundaries.
pub fn gen_corpus(per_bin: usize, seed: u64, width: usize, height: usize) -> Result<Vec<MaskSpec>> {
    let mut out = Vec::with_capacity(per_bin * RatioBin::COUNT);
    for bin in RatioBin::all() {
        for i in 0..per_bin {
            out.push(gen_irregular_mask(bin, i % 2 == 0, corpus_seed(seed, bin, i), width, height)?);
        }
    }
    Ok(out)
}

/// Lists mask files from a directory tree with one subdirectory per bin (`0-10` … `50-60`).
pub fn scan_mask_corpus(root: &Path) -> Result<Vec<(RatioBin, PathBuf)>> {
    let mut out = Vec::new();
    for bin in RatioBin::all() {
        let dir = root.join(bin.dir_name());
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        out.extend(files.into_iter().map(|p| (bin, p)));
    }
    Ok(out)
}
