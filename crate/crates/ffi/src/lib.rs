//! C ABI over the inference side of `facdiff`: load a checkpoint, segment
//! images, generate samples.
//!
//! Every function returns a [`FacdiffStatus`]. On failure a description is
//! kept per thread and can be read with [`facdiff_last_error`]. Panics are
//! caught at the boundary and reported as `FACDIFF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use facdiff::checkpoint;
use facdiff::diffusion::NoiseSchedule;
use facdiff::sampler::{generate_with, segment_with, GenerateOptions, SegmentOptions};
use facdiff::trainer::TrainState;
use facdiff::Error;

/// Result codes. The non-zero values of the command-line tool are reused.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FacdiffStatus {
    Ok = 0,
    /// Invalid argument or configuration.
    Config = 2,
    /// File system, decoding or checkpoint format error.
    Io = 3,
    /// Non-finite values or a tensor kernel failure.
    Numeric = 4,
    /// A required pointer was null.
    NullPointer = 5,
    /// A Rust panic was caught.
    Panic = 6,
}

/// Opaque model handle.
pub struct FacdiffModel {
    state: TrainState,
    schedule: NoiseSchedule,
}

/// Shape information of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FacdiffModelInfo {
    pub resolution: u32,
    pub channels: u32,
    pub regions: u32,
    pub diffusion_steps: u32,
    pub default_t_seg: u32,
    pub training_step: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FacdiffStatus {
    match e.exit_code() {
        2 => FacdiffStatus::Config,
        3 => FacdiffStatus::Io,
        _ => FacdiffStatus::Numeric,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (FacdiffStatus, String)>) -> FacdiffStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FacdiffStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FacdiffStatus::Panic
        }
    }
}

fn lift<T>(r: facdiff::Result<T>) -> Result<T, (FacdiffStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (FacdiffStatus, String) {
    (FacdiffStatus::NullPointer, format!("{what} is null"))
}

/// Text of the last error on this thread; empty after a success. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn facdiff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn facdiff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint into a new handle written to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn facdiff_model_load(path: *const c_char, out: *mut *mut FacdiffModel) -> FacdiffStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (FacdiffStatus::Config, "path is not UTF-8".to_string()))?;
        let ck = lift(checkpoint::load_full(Path::new(path), None))?;
        let schedule = match ck.schedule {
            Some(s) => s,
            None => {
                return Err((
                    FacdiffStatus::Io,
                    format!("{path}: checkpoint does not record its noise schedule"),
                ))
            }
        };
        let model = Box::new(FacdiffModel {
            state: ck.state,
            schedule,
        });
        *out = Box::into_raw(model);
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `facdiff_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn facdiff_model_free(model: *mut FacdiffModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `info` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn facdiff_model_info(model: *const FacdiffModel, info: *mut FacdiffModelInfo) -> FacdiffStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let info = info.as_mut().ok_or_else(|| null("info"))?;
        let a = &m.state.arch;
        *info = FacdiffModelInfo {
            resolution: a.resolution as u32,
            channels: a.img_channels as u32,
            regions: a.num_regions as u32,
            diffusion_steps: m.schedule.steps() as u32,
            default_t_seg: m.schedule.default_segmentation_t() as u32,
            training_step: m.state.step,
        };
        Ok(())
    })
}

/// One-step segmentation with the EMA weights.
///
/// `images` holds `n` images as `C x H x W` floats in [-1, 1]. `labels`
/// receives `n x H x W` region indices. `soft`, if not null, receives
/// `n x K x H x W` mask values. `t_seg = 0` selects the model's default.
///
/// # Safety
/// Buffers must be valid for the sizes above.
#[no_mangle]
pub unsafe extern "C" fn facdiff_segment(
    model: *const FacdiffModel,
    images: *const f32,
    n: usize,
    t_seg: u32,
    seed: u64,
    labels: *mut u8,
    soft: *mut f32,
) -> FacdiffStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if images.is_null() {
            return Err(null("images"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        if n == 0 {
            return Err((FacdiffStatus::Config, "n must be >= 1".into()));
        }
        let a = &m.state.arch;
        let (c, r, k) = (a.img_channels, a.resolution, a.num_regions);
        let input = std::slice::from_raw_parts(images, n * c * r * r).to_vec();
        let x = lift(Tensor::from_vec(input, (n, c, r, r), &Device::Cpu).map_err(Error::from))?;
        let t = if t_seg == 0 {
            m.schedule.default_segmentation_t()
        } else {
            t_seg as usize
        };
        let opts = SegmentOptions::new(t, seed);
        let res = lift(segment_with(&x, &opts, m.state.ema_model(), &m.schedule))?;
        std::slice::from_raw_parts_mut(labels, n * r * r).copy_from_slice(&res.hard);
        if !soft.is_null() {
            let v = lift(
                res.soft
                    .tensor()
                    .to_dtype(DType::F32)
                    .and_then(|t| t.flatten_all())
                    .and_then(|t| t.to_vec1::<f32>())
                    .map_err(Error::from),
            )?;
            std::slice::from_raw_parts_mut(soft, n * k * r * r).copy_from_slice(&v);
        }
        Ok(())
    })
}

/// Sample `n` images (`n x C x H x W` floats in [-1, 1]) with the EMA
/// weights; `labels`, if not null, receives their `n x H x W` region maps.
///
/// # Safety
/// Buffers must be valid for the sizes above.
#[no_mangle]
pub unsafe extern "C" fn facdiff_generate(
    model: *const FacdiffModel,
    n: usize,
    seed: u64,
    images: *mut f32,
    labels: *mut u8,
) -> FacdiffStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if images.is_null() {
            return Err(null("images"));
        }
        let a = &m.state.arch;
        let (c, r) = (a.img_channels, a.resolution);
        let g = lift(generate_with(n, &GenerateOptions::new(seed), m.state.ema_model(), &m.schedule))?;
        let v = lift(
            g.images
                .to_dtype(DType::F32)
                .and_then(|t| t.flatten_all())
                .and_then(|t| t.to_vec1::<f32>())
                .map_err(Error::from),
        )?;
        std::slice::from_raw_parts_mut(images, n * c * r * r).copy_from_slice(&v);
        if !labels.is_null() {
            std::slice::from_raw_parts_mut(labels, n * r * r).copy_from_slice(&g.masks.hard);
        }
        Ok(())
    })
}
