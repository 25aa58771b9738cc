//! C interface to `irsr-core`.
//!
//! Every function returns an [`IrsrStatus`]; on failure a message is kept per
//! thread and can be read with [`irsr_last_error_message`]. Models are opaque
//! handles created by [`irsr_model_load`] or [`irsr_model_new`] and released
//! with [`irsr_model_free`].
//!
//! Image buffers are 8-bit and interleaved (`height * width * channels`,
//! row-major). Metric buffers are `double` on the `[0, 255]` scale.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use irsr_core::data::{ColorSpace, ImageBuffer};
use irsr_core::{checkpoint, metrics, train, Error, Model, ModelConfig, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IrsrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Data = 4,
    Numeric = 5,
    Io = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct IrsrModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: IrsrStatus, msg: impl Into<String>) -> IrsrStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> IrsrStatus {
    let status = match &e {
        Error::Argument(_) => IrsrStatus::InvalidArgument,
        Error::Dimension(_) => IrsrStatus::Dimension,
        Error::Numeric(_) => IrsrStatus::Numeric,
        Error::Parse { .. } | Error::Data(_) => IrsrStatus::Data,
        Error::Io(_) => IrsrStatus::Io,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> IrsrStatus) -> IrsrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(IrsrStatus::Panic, "internal panic"),
    }
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn irsr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, IrsrStatus> {
    if path.is_null() {
        return Err(fail(IrsrStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(IrsrStatus::InvalidArgument, "path is not valid UTF-8"))
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn irsr_model_load(path: *const c_char, out: *mut *mut IrsrModel) -> IrsrStatus {
    guard(|| {
        if out.is_null() {
            return fail(IrsrStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match checkpoint::load(path) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(IrsrModel { model }));
                IrsrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Freshly initialised model with the default architecture at `scale`.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn irsr_model_new(scale: u32, seed: u64, out: *mut *mut IrsrModel) -> IrsrStatus {
    guard(|| {
        if out.is_null() {
            return fail(IrsrStatus::NullPointer, "out is null");
        }
        let config = ModelConfig { scale: scale as usize, ..ModelConfig::default() };
        match Model::new(config, seed) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(IrsrModel { model }));
                IrsrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Writes a checkpoint directory.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn irsr_model_save(model: *const IrsrModel, path: *const c_char) -> IrsrStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(IrsrStatus::NullPointer, "model is null");
        };
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        checkpoint::save(&m.model, path).map_or_else(from_error, |_| IrsrStatus::Ok)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn irsr_model_free(model: *mut IrsrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Upsampling factor, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn irsr_model_scale(model: *const IrsrModel) -> u32 {
    model.as_ref().map_or(0, |m| m.model.config.scale as u32)
}

/// Number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn irsr_model_param_count(model: *const IrsrModel) -> u64 {
    model.as_ref().map_or(0, |m| m.model.param_count() as u64)
}

/// Super-resolves an interleaved 8-bit image. `output` must hold
/// `scale^2 * width * height * channels` bytes.
///
/// # Safety
/// `input` must point to `width * height * channels` bytes and `output` to
/// `output_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn irsr_model_super_resolve(
    model: *const IrsrModel,
    input: *const u8,
    width: u32,
    height: u32,
    channels: u32,
    output: *mut u8,
    output_len: usize,
) -> IrsrStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(IrsrStatus::NullPointer, "model is null");
        };
        if input.is_null() || output.is_null() {
            return fail(IrsrStatus::NullPointer, "image buffer is null");
        }
        let color = match channels {
            1 => ColorSpace::Gray,
            3 => ColorSpace::Rgb,
            c => return fail(IrsrStatus::InvalidArgument, format!("unsupported channel count {c}")),
        };
        let (w, h, c) = (width as usize, height as usize, channels as usize);
        let s = m.model.config.scale;
        let need = s * s * w * h * c;
        if output_len < need {
            return fail(IrsrStatus::InvalidArgument, format!("output holds {output_len} bytes, {need} needed"));
        }
        let src = std::slice::from_raw_parts(input, w * h * c);
        let planar = (0..w * h * c).map(|i| src[(i % (w * h)) * c + i / (w * h)]).collect();
        let img = match ImageBuffer::new(color, h, w, planar) {
            Ok(i) => i,
            Err(e) => return from_error(e),
        };
        let sr = match train::super_resolve(&m.model, &img) {
            Ok(sr) => sr,
            Err(e) => return from_error(e),
        };
        let dst = std::slice::from_raw_parts_mut(output, need);
        let n = sr.width * sr.height;
        for (i, d) in dst.iter_mut().enumerate() {
            *d = sr.data[(i % c) * n + i / c];
        }
        IrsrStatus::Ok
    })
}

unsafe fn pair(sr: *const f64, gt: *const f64, len: usize) -> Result<(Tensor, Tensor), IrsrStatus> {
    if sr.is_null() || gt.is_null() {
        return Err(fail(IrsrStatus::NullPointer, "image buffer is null"));
    }
    let t = |p: *const f64| Tensor::new(&[len], std::slice::from_raw_parts(p, len).to_vec()).unwrap();
    Ok((t(sr), t(gt)))
}

/// PSNR in dB. Identical inputs store positive infinity.
///
/// # Safety
/// `sr` and `gt` must point to `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn irsr_psnr(sr: *const f64, gt: *const f64, len: usize, peak: f64, out: *mut f64) -> IrsrStatus {
    guard(|| {
        if out.is_null() {
            return fail(IrsrStatus::NullPointer, "out is null");
        }
        let (a, b) = match pair(sr, gt, len) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match metrics::psnr(&a, &b, peak) {
            Ok(p) => {
                *out = p.unwrap_or(f64::INFINITY);
                IrsrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Mean SSIM of two `height x width` single-channel images.
///
/// # Safety
/// `sr` and `gt` must point to `width * height` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn irsr_ssim(sr: *const f64, gt: *const f64, width: u32, height: u32, out: *mut f64) -> IrsrStatus {
    guard(|| {
        if out.is_null() {
            return fail(IrsrStatus::NullPointer, "out is null");
        }
        let (w, h) = (width as usize, height as usize);
        let (a, b) = match pair(sr, gt, w * h) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match metrics::ssim(&a.reshape(&[h, w]).unwrap(), &b.reshape(&[h, w]).unwrap()) {
            Ok(v) => {
                *out = v;
                IrsrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Fractions of absolute residuals in `[0,5)`, `[5,10)`, `[10,15)`, `[15,inf)`.
///
/// # Safety
/// `sr` and `gt` must point to `len` doubles; `out` must hold 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn irsr_residual_distribution(sr: *const f64, gt: *const f64, len: usize, out: *mut f64) -> IrsrStatus {
    guard(|| {
        if out.is_null() {
            return fail(IrsrStatus::NullPointer, "out is null");
        }
        let (a, b) = match pair(sr, gt, len) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match metrics::residual_distribution(&a, &b) {
            Ok(d) => {
                std::slice::from_raw_parts_mut(out, 4).copy_from_slice(&d);
                IrsrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
