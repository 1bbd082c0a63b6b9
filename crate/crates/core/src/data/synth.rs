//! Procedural test scenes: smooth colour fields with random discs and bars,
//! rendered on an oversized canvas so shifted views are exact.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Scene {
    canvas: RgbImage,
    margin: u32,
}

impl Scene {
    /// Canvas covering `width`×`height` plus `margin` pixels on every side.
    pub fn new(width: u32, height: u32, margin: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cw, ch) = (width + 2 * margin, height + 2 * margin);
        let base: [f32; 3] = [rng.gen_range(60.0..190.0), rng.gen_range(60.0..190.0), rng.gen_range(60.0..190.0)];
        let (fx, fy) = (rng.gen_range(0.005..0.02f32), rng.gen_range(0.005..0.02f32));
        let mut canvas = RgbImage::from_fn(cw, ch, |x, y| {
            let t = (x as f32 * fx).sin() * 30.0 + (y as f32 * fy).cos() * 30.0;
            Rgb(base.map(|b| (b + t).clamp(0.0, 255.0) as u8))
        });
        let area = (cw * ch) as f32;
        let shapes = (area / 400.0).ceil() as usize;
        for _ in 0..shapes {
            let color = Rgb([rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()]);
            let (cx, cy) = (rng.gen_range(0.0..cw as f32), rng.gen_range(0.0..ch as f32));
            if rng.gen_bool(0.6) {
                let r = rng.gen_range(2.0..14.0f32);
                paint(&mut canvas, cx - r, cy - r, cx + r, cy + r, color, |x, y| {
                    (x - cx).powi(2) + (y - cy).powi(2) <= r * r
                });
            } else {
                let (hw, hh) = (rng.gen_range(2.0..18.0f32), rng.gen_range(2.0..18.0f32));
                paint(&mut canvas, cx - hw, cy - hh, cx + hw, cy + hh, color, |_, _| true);
            }
        }
        Self { canvas, margin }
    }

    /// The `width`×`height` window moved by `(dx, dy)`: `view(dx, dy)[p] = view(0, 0)[p + (dx, dy)]`.
    pub fn view(&self, dx: i32, dy: i32, width: u32, height: u32) -> RgbImage {
        let x0 = (self.margin as i32 + dx).clamp(0, (self.canvas.width() - width) as i32) as u32;
        let y0 = (self.margin as i32 + dy).clamp(0, (self.canvas.height() - height) as i32) as u32;
        image::imageops::crop_imm(&self.canvas, x0, y0, width, height).to_image()
    }
}

fn paint(img: &mut RgbImage, x0: f32, y0: f32, x1: f32, y1: f32, color: Rgb<u8>, inside: impl Fn(f32, f32) -> bool) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for y in (y0.floor() as i64).max(0)..=(y1.ceil() as i64).min(h - 1) {
        for x in (x0.floor() as i64).max(0)..=(x1.ceil() as i64).min(w - 1) {
            if inside(x as f32, y as f32) {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}
