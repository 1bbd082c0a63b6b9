//! C ABI over the inpainting library.
//!
//! Every entry point returns a [`TrStatus`]. On failure a description is
//! kept per thread and read with [`tr_last_error`]. Models are opaque
//! [`TrModel`] handles released with [`tr_model_free`]. Image buffers are
//! tightly packed row-major RGB8; masks are one byte per pixel, 0 = known
//! and 255 = missing.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use transref::data::image_io::{rgb_to_tensor, tensor_to_rgb};
use transref::data::mask::{classify_mask_ratio, gen_irregular_mask, Mask, RatioBin};
use transref::metrics::{psnr_rgb, ssim_rgb};
use transref::model::{InpaintingModel, ModelConfig};
use transref::tensor::Tensor;
use transref::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    VersionMismatch = 5,
    Config = 6,
    Sizing = 7,
    Contract = 8,
    OutOfProtocol = 9,
    MaskGeneration = 10,
    Numeric = 11,
    Panic = 12,
    Internal = 13,
}

/// Opaque model handle.
pub struct TrModel {
    inner: InpaintingModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn status_of(e: &Error) -> TrStatus {
    match e {
        Error::Contract { .. } => TrStatus::Contract,
        Error::Sizing { .. } => TrStatus::Sizing,
        Error::Checkpoint(_) => TrStatus::Checkpoint,
        Error::CheckpointVersion { .. } => TrStatus::VersionMismatch,
        Error::Config(_) => TrStatus::Config,
        Error::MaskGeneration(_) => TrStatus::MaskGeneration,
        Error::OutOfProtocol(_) => TrStatus::OutOfProtocol,
        Error::NotPsd(_) => TrStatus::Numeric,
        Error::Image { .. } | Error::Io(_) => TrStatus::Io,
        _ => TrStatus::Internal,
    }
}

struct Fail(TrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TrStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            TrStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(TrStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(TrStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn pixels(width: u32, height: u32) -> Result<usize, Fail> {
    if width == 0 || height == 0 {
        return Err(Fail(TrStatus::InvalidArgument, format!("empty image {width}×{height}")));
    }
    (width as usize).checked_mul(height as usize).ok_or(Fail(TrStatus::InvalidArgument, "image too large".into()))
}

unsafe fn slice<'a>(p: *const u8, len: usize, what: &str) -> Result<&'a [u8], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn rgb(p: *const u8, width: u32, height: u32, what: &str) -> Result<image::RgbImage, Fail> {
    let n = pixels(width, height)?;
    let data = slice(p, n * 3, what)?.to_vec();
    image::RgbImage::from_raw(width, height, data).ok_or(Fail(TrStatus::InvalidArgument, format!("{what}: bad size")))
}

unsafe fn mask_bits(p: *const u8, width: u32, height: u32) -> Result<Mask, Fail> {
    let n = pixels(width, height)?;
    let raw = slice(p, n, "mask")?;
    let mut bits = Vec::with_capacity(n);
    for &v in raw {
        match v {
            0 => bits.push(0),
            255 => bits.push(1),
            other => return Err(Fail(TrStatus::Contract, format!("mask value {other} is neither 0 nor 255"))),
        }
    }
    Ok(Mask { width: width as usize, height: height as usize, bits })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Fresh model from a preset name (`"toy"` or `"full"`) and seed.
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tr_model_new(preset: *const c_char, seed: u64, out: *mut *mut TrModel) -> TrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let name = str_arg(preset, "preset")?;
        let cfg = ModelConfig::preset(name)
            .ok_or_else(|| Fail(TrStatus::InvalidArgument, format!("unknown preset {name:?}")))?;
        let inner = InpaintingModel::new(&cfg, seed)?;
        *out = Box::into_raw(Box::new(TrModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint and the `.cfg` file beside it.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tr_model_load(path: *const c_char, out: *mut *mut TrModel) -> TrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = InpaintingModel::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(TrModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tr_model_save(model: *const TrModel, path: *const c_char) -> TrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        m.inner.save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tr_model_free(model: *mut TrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters.
///
/// # Safety
/// `model` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tr_model_parameter_count(model: *const TrModel, out: *mut u64) -> TrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.inner.params.total_elements() as u64;
        Ok(())
    })
}

/// Inpaints one image. Width and height must be multiples of 32. The
/// composited result is written to `out_rgb` (`width * height * 3` bytes).
///
/// # Safety
/// All buffers must hold the stated number of bytes.
#[no_mangle]
pub unsafe extern "C" fn tr_model_inpaint(
    model: *const TrModel,
    image_rgb: *const u8,
    mask: *const u8,
    reference_rgb: *const u8,
    width: u32,
    height: u32,
    out_rgb: *mut u8,
) -> TrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_rgb.is_null() {
            return Err(null("out_rgb"));
        }
        let img = rgb(image_rgb, width, height, "image_rgb")?;
        let refimg = rgb(reference_rgb, width, height, "reference_rgb")?;
        let mask = mask_bits(mask, width, height)?;
        let (w, h) = (width as usize, height as usize);
        let image = rgb_to_tensor::<f32>(&img).reshape(&[1, 3, h, w])?;
        let reference = rgb_to_tensor::<f32>(&refimg).reshape(&[1, 3, h, w])?;
        let mask_t: Tensor<f32> = mask.to_tensor::<f32>().reshape(&[1, 1, h, w])?;
        let out = m.inner.inpaint(&image, &mask_t, &reference)?;
        let result = tensor_to_rgb(&out.reshape(&[3, h, w])?)?;
        std::ptr::copy_nonoverlapping(result.as_raw().as_ptr(), out_rgb, w * h * 3);
        Ok(())
    })
}

/// Generates a stroke mask whose hole ratio falls in bin `bin` (0 = 0–10%
/// … 5 = 50–60%). Writes `width * height` bytes of 0/255.
///
/// # Safety
/// `out_mask` must hold `width * height` bytes.
#[no_mangle]
pub unsafe extern "C" fn tr_mask_generate(
    bin: u32,
    damaged_boundary: bool,
    seed: u64,
    width: u32,
    height: u32,
    out_mask: *mut u8,
) -> TrStatus {
    guard(|| {
        let n = pixels(width, height)?;
        if out_mask.is_null() {
            return Err(null("out_mask"));
        }
        let bin = RatioBin::new(bin as usize)
            .ok_or_else(|| Fail(TrStatus::InvalidArgument, format!("bin {bin} is outside 0..6")))?;
        let spec = gen_irregular_mask(bin, damaged_boundary, seed, width as usize, height as usize)?;
        let out = std::slice::from_raw_parts_mut(out_mask, n);
        for (o, &b) in out.iter_mut().zip(&spec.mask.bits) {
            *o = if b != 0 { 255 } else { 0 };
        }
        Ok(())
    })
}

/// Ratio bin index (0–5) of a 0/255 mask.
///
/// # Safety
/// `mask` must hold `width * height` bytes; `out_bin` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tr_mask_classify(mask: *const u8, width: u32, height: u32, out_bin: *mut u32) -> TrStatus {
    guard(|| {
        if out_bin.is_null() {
            return Err(null("out_bin"));
        }
        let m = mask_bits(mask, width, height)?;
        *out_bin = classify_mask_ratio(&m)?.index() as u32;
        Ok(())
    })
}

/// PSNR in dB over all channels of two RGB8 images; `INFINITY` when identical.
///
/// # Safety
/// Both buffers must hold `width * height * 3` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tr_psnr_rgb(a: *const u8, b: *const u8, width: u32, height: u32, out: *mut f64) -> TrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = psnr_rgb(&rgb(a, width, height, "a")?, &rgb(b, width, height, "b")?)?;
        Ok(())
    })
}

/// Luminance SSIM of two RGB8 images.
///
/// # Safety
/// Both buffers must hold `width * height * 3` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tr_ssim_rgb(a: *const u8, b: *const u8, width: u32, height: u32, out: *mut f64) -> TrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ssim_rgb(&rgb(a, width, height, "a")?, &rgb(b, width, height, "b")?)?;
        Ok(())
    })
}
