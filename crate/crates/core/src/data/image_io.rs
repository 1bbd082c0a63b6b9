//! PNG loading and conversion between 8-bit rasters and model tensors.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{contract, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8())
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_luma8())
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// `[3, H, W]` with values `v / 127.5 − 1`.
pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, pix) = (i / (h * w), i % (h * w));
        T::from_f64_lossy(raw[pix * 3 + c] as f64 / 127.5 - 1.0)
    })
}

/// Inverse of [`rgb_to_tensor`], rounding to the nearest 8-bit level.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return contract("tensor_to_rgb", format!("expected [3,H,W], got {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let pix = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| quantize(d[c * h * w + pix])))
    }))
}

pub fn quantize<T: Scalar>(v: T) -> u8 {
    let v = v.to_f64().unwrap_or(0.0);
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Binary mask `[1, H, W]`: pixels above 127 are missing (1).
pub fn gray_to_mask<T: Scalar>(img: &GrayImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[1, h, w], |i| if raw[i] > 127 { T::one() } else { T::zero() })
}

pub fn mask_bits_to_gray(bits: &[u8], width: usize, height: usize) -> GrayImage {
    GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([if bits[y as usize * width + x as usize] != 0 { 255 } else { 0 }])
    })
}

/// Concatenates equally shaped tensors along a new leading batch axis.
pub fn stack<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = items.first() else {
        return contract("stack", "no tensors");
    };
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return contract("stack", format!("{:?} differs from {:?}", t.shape(), first.shape()));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(&shape, data)
}

/// Horizontal strip of equally sized images.
pub fn side_by_side(images: &[&RgbImage]) -> RgbImage {
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let w: u32 = images.iter().map(|i| i.width()).sum();
    let mut out = RgbImage::new(w, h);
    let mut x0 = 0;
    for img in images {
        image::imageops::replace(&mut out, *img, x0 as i64, 0);
        x0 += img.width();
    }
    out
}
