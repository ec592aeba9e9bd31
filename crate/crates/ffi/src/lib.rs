//! C ABI over the msx models and metrics.
//!
//! Models are opaque handles created by `*_load` and released by `*_free`.
//! Every fallible call returns an [`MsxStatus`]; on failure the message is
//! available from [`msx_last_error`] on the same thread. Images are passed
//! as row-major `f32` planes in `[0, 1]`, `n` planes of `side × side`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use msx::data::Image;
use msx::harness::checkpoint::Checkpoint;
use msx::harness::models::{ClsModel, SegModel};
use msx::metrics::{metric_suite, tally, ConfusionCounts};
use msx::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Dimension = 5,
    NonFinite = 6,
    Panic = 7,
}

/// Segmentation model handle.
pub struct MsxSegModel {
    inner: SegModel,
}

/// Classification model handle.
pub struct MsxClsModel {
    inner: ClsModel,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MsxCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Bits of [`MsxMetrics::degenerate`]: set when the metric's denominator
/// was zero and the value was reported as 0.
pub const MSX_DEGENERATE_PRECISION: u32 = 1;
pub const MSX_DEGENERATE_RECALL: u32 = 2;
pub const MSX_DEGENERATE_F1: u32 = 4;
pub const MSX_DEGENERATE_MCC: u32 = 8;
pub const MSX_DEGENERATE_DICE: u32 = 16;

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MsxMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub dice: f64,
    pub degenerate: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend(msg.bytes().filter(|&b| b != 0));
    });
}

struct Failure(MsxStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => MsxStatus::Io,
            Error::Checkpoint(_) => MsxStatus::Checkpoint,
            Error::Dimension { .. } => MsxStatus::Dimension,
            Error::NonFinite { .. } | Error::Diverged { .. } => MsxStatus::NonFinite,
            _ => MsxStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: MsxStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `body`, converting errors and panics into a status plus message.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> MsxStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            MsxStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MsxStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(MsxStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `path` must be a valid NUL-terminated string.
unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    non_null(path, "path")?;
    let s = unsafe { CStr::from_ptr(path) }
        .to_str()
        .map_err(|_| fail(MsxStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

/// # Safety
/// `pixels` must point to `n * side * side` readable floats.
unsafe fn images_arg(
    pixels: *const f32,
    n: usize,
    side: usize,
    want_side: usize,
) -> Result<Vec<Image>, Failure> {
    non_null(pixels, "pixels")?;
    if side != want_side {
        return Err(fail(
            MsxStatus::Dimension,
            format!("model expects side {want_side}, got {side}"),
        ));
    }
    if n == 0 {
        return Err(fail(MsxStatus::InvalidArgument, "no images"));
    }
    let plane = side * side;
    let all = unsafe { std::slice::from_raw_parts(pixels, n * plane) };
    all.chunks(plane)
        .map(|p| Image::new(side, side, p.to_vec()).map_err(Failure::from))
        .collect()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn msx_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(e.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        e.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn msx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a segmentation checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msx_seg_model_load(
    path: *const c_char,
    out: *mut *mut MsxSegModel,
) -> MsxStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = unsafe { path_arg(path) }?;
        let inner = SegModel::from_checkpoint(&Checkpoint::load(&path)?)?;
        unsafe { *out = Box::into_raw(Box::new(MsxSegModel { inner })) };
        Ok(())
    })
}

/// Input side length of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msx_seg_model_side(model: *const MsxSegModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.inner.side())
}

/// Predicts binary lung masks: `masks` receives `n * side * side` bytes of 0/1.
///
/// # Safety
/// `model` must be a live handle, `pixels` readable and `masks` writable
/// for `n * side * side` elements.
#[no_mangle]
pub unsafe extern "C" fn msx_seg_predict(
    model: *const MsxSegModel,
    pixels: *const f32,
    n: usize,
    side: usize,
    threshold: f64,
    masks: *mut u8,
) -> MsxStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(masks, "masks")?;
        let m = unsafe { &(*model).inner };
        let images = unsafe { images_arg(pixels, n, side, m.side()) }?;
        let refs: Vec<&Image> = images.iter().collect();
        let pred = m.predict_masks(&refs, threshold)?;
        let out = unsafe { std::slice::from_raw_parts_mut(masks, n * side * side) };
        for (dst, img) in out.chunks_mut(side * side).zip(&pred) {
            for (d, b) in dst.iter_mut().zip(img.to_bits()) {
                *d = b;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`msx_seg_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msx_seg_model_free(model: *mut MsxSegModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Loads a classification checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msx_cls_model_load(
    path: *const c_char,
    out: *mut *mut MsxClsModel,
) -> MsxStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = unsafe { path_arg(path) }?;
        let inner = ClsModel::from_checkpoint(&Checkpoint::load(&path)?)?;
        unsafe { *out = Box::into_raw(Box::new(MsxClsModel { inner })) };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msx_cls_model_side(model: *const MsxClsModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.inner.side())
}

/// Positive-class probability per image into `probs` (`n` floats).
///
/// # Safety
/// `model` must be a live handle, `pixels` readable for `n * side * side`
/// floats and `probs` writable for `n` floats.
#[no_mangle]
pub unsafe extern "C" fn msx_cls_predict(
    model: *const MsxClsModel,
    pixels: *const f32,
    n: usize,
    side: usize,
    probs: *mut f32,
) -> MsxStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(probs, "probs")?;
        let m = unsafe { &(*model).inner };
        let images = unsafe { images_arg(pixels, n, side, m.side()) }?;
        let refs: Vec<&Image> = images.iter().collect();
        let p = m.predict_probs(&refs)?;
        unsafe { std::slice::from_raw_parts_mut(probs, n) }.copy_from_slice(&p);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`msx_cls_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msx_cls_model_free(model: *mut MsxClsModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Confusion counts of two binary sequences of length `len`.
///
/// # Safety
/// `pred` and `truth` must be readable for `len` bytes; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msx_tally(
    pred: *const u8,
    truth: *const u8,
    len: usize,
    out: *mut MsxCounts,
) -> MsxStatus {
    guard(|| {
        non_null(pred, "pred")?;
        non_null(truth, "truth")?;
        non_null(out, "out")?;
        let (p, t) = unsafe {
            (
                std::slice::from_raw_parts(pred, len),
                std::slice::from_raw_parts(truth, len),
            )
        };
        let c = tally(p, t)?;
        unsafe {
            *out = MsxCounts {
                tp: c.tp,
                tn: c.tn,
                fp: c.fp,
                fn_: c.r#fn,
            }
        };
        Ok(())
    })
}

/// Accuracy, precision, recall, F1, MCC and Dice of `counts`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msx_metric_suite(counts: MsxCounts, out: *mut MsxMetrics) -> MsxStatus {
    guard(|| {
        non_null(out, "out")?;
        let s = metric_suite(&ConfusionCounts::new(
            counts.tp, counts.tn, counts.fp, counts.fn_,
        ))?;
        let d = s.degenerate;
        let degenerate = [
            (d.precision, MSX_DEGENERATE_PRECISION),
            (d.recall, MSX_DEGENERATE_RECALL),
            (d.f1, MSX_DEGENERATE_F1),
            (d.mcc, MSX_DEGENERATE_MCC),
            (d.dice, MSX_DEGENERATE_DICE),
        ]
        .iter()
        .filter(|(set, _)| *set)
        .fold(0, |acc, (_, bit)| acc | bit);
        unsafe {
            *out = MsxMetrics {
                accuracy: s.accuracy,
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
                mcc: s.mcc,
                dice: s.dice,
                degenerate,
            }
        };
        Ok(())
    })
}
