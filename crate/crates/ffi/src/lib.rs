//! C ABI over the edgedoc model and metric functions.
//!
//! Every function returns an [`EdgedocStatus`]. On failure a description is
//! available from [`edgedoc_last_error`] on the same thread. Models are opaque
//! handles created by `edgedoc_model_load` / `edgedoc_model_new` and released
//! with `edgedoc_model_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use edgedoc::data::Plane;
use edgedoc::eval::{self, Detection, EvalRecord};
use edgedoc::{checkpoint, EdgeDoc, Error, ModelConfig, Tensor};

/// Result codes shared by every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgedocStatus {
    Ok = 0,
    InvalidArgument = 1,
    Io = 2,
    Format = 3,
    Numeric = 4,
    Checkpoint = 5,
    IdMismatch = 6,
    Degenerate = 7,
    Internal = 8,
}

/// Opaque model handle.
pub struct EdgedocModel {
    inner: EdgeDoc,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EdgedocMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1_weighted: f64,
    pub roc_auc: f64,
    pub mcc: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EdgedocStatus {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Shape { .. } => EdgedocStatus::InvalidArgument,
        Error::Io { .. } => EdgedocStatus::Io,
        Error::Image { .. } | Error::Format { .. } => EdgedocStatus::Format,
        Error::NonFinite { .. } | Error::Diverged { .. } => EdgedocStatus::Numeric,
        Error::Checkpoint(_) => EdgedocStatus::Checkpoint,
        Error::IdMismatch(_) => EdgedocStatus::IdMismatch,
        Error::Degenerate(_) => EdgedocStatus::Degenerate,
    }
}

struct Fail(EdgedocStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(EdgedocStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EdgedocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EdgedocStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            EdgedocStatus::Internal
        }
    }
}

unsafe fn input_slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output_slice<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| invalid(format!("{what} is null")))
}

/// Message for the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn edgedoc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn edgedoc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn edgedoc_model_load(path: *const c_char, out: *mut *mut EdgedocModel) -> EdgedocStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        if path.is_null() {
            return Err(invalid("path is null"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let (inner, _) = checkpoint::load(path)?;
        *out = Box::into_raw(Box::new(EdgedocModel { inner }));
        Ok(())
    })
}

/// Freshly initialized model; `reduced` selects the small widths.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn edgedoc_model_new(
    seed: u64,
    reduced: bool,
    height: u32,
    width: u32,
    out: *mut *mut EdgedocModel,
) -> EdgedocStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let mut cfg = if reduced { ModelConfig::reduced(height as usize) } else { ModelConfig::default() };
        cfg.input_size = (height as usize, width as usize);
        let inner = EdgeDoc::build(cfg, seed)?;
        *out = Box::into_raw(Box::new(EdgedocModel { inner }));
        Ok(())
    })
}

/// Writes a model to a checkpoint directory.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn edgedoc_model_save(model: *const EdgedocModel, path: *const c_char) -> EdgedocStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        if path.is_null() {
            return Err(invalid("path is null"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        checkpoint::save(path, &model.inner, &Default::default())?;
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn edgedoc_model_free(model: *mut EdgedocModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Expected input height and width.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn edgedoc_model_input_size(
    model: *const EdgedocModel,
    height: *mut u32,
    width: *mut u32,
) -> EdgedocStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        let (h, w) = model.inner.config().input_size;
        *out_ref(height, "height")? = h as u32;
        *out_ref(width, "width")? = w as u32;
        Ok(())
    })
}

/// Number of scalar parameters.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn edgedoc_model_num_params(model: *const EdgedocModel, out: *mut u64) -> EdgedocStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        *out_ref(out, "out")? = model.inner.params().num_elements() as u64;
        Ok(())
    })
}

/// Scores one 2×H×W input (green channel, then residual). Writes the attack
/// probability to `score` and H·W mask probabilities to `mask`, which may be
/// NULL when `mask_len` is 0.
///
/// # Safety
/// `input` must hold `input_len` floats and `mask` `mask_len` floats.
#[no_mangle]
pub unsafe extern "C" fn edgedoc_model_predict(
    model: *const EdgedocModel,
    input: *const f32,
    input_len: usize,
    score: *mut f32,
    mask: *mut f32,
    mask_len: usize,
) -> EdgedocStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        let (h, w) = model.inner.config().input_size;
        if input_len != 2 * h * w {
            return Err(invalid(format!("input holds {input_len} floats, expected {}", 2 * h * w)));
        }
        if mask_len != 0 && mask_len != h * w {
            return Err(invalid(format!("mask buffer holds {mask_len} floats, expected 0 or {}", h * w)));
        }
        let x = Tensor::new([1, 2, h, w], input_slice(input, input_len, "input")?.to_vec())?;
        let pred = model.inner.predict(&x)?.remove(0);
        *out_ref(score, "score")? = pred.score;
        if mask_len > 0 {
            output_slice(mask, mask_len, "mask")?.copy_from_slice(&pred.mask);
        }
        Ok(())
    })
}

fn records(labels: &[u8], scores: &[f32]) -> Result<Vec<EvalRecord>, Fail> {
    labels
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (&label, &score))| {
            let r = EvalRecord {
                id: i.to_string(),
                label,
                score,
                mask_path: None,
            };
            r.validate()?;
            Ok(r)
        })
        .collect()
}

/// Detection metrics with the attack class (label 1) as positive.
///
/// # Safety
/// `labels` and `scores` must hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn edgedoc_metrics(
    labels: *const u8,
    scores: *const f32,
    n: usize,
    threshold: f32,
    out: *mut EdgedocMetrics,
) -> EdgedocStatus {
    guard(|| {
        let recs = records(input_slice(labels, n, "labels")?, input_slice(scores, n, "scores")?)?;
        let m = eval::metrics(&recs, threshold)?;
        *out_ref(out, "out")? = EdgedocMetrics {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1_weighted: m.f1_weighted,
            roc_auc: m.roc_auc,
            mcc: m.mcc,
            tp: m.confusion.tp,
            fp: m.confusion.fp,
            tn: m.confusion.tn,
            fn_: m.confusion.fn_,
        };
        Ok(())
    })
}

/// # Safety
/// `labels` and `scores` must hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn edgedoc_roc_auc(
    labels: *const u8,
    scores: *const f32,
    n: usize,
    out: *mut f64,
) -> EdgedocStatus {
    guard(|| {
        let recs = records(input_slice(labels, n, "labels")?, input_slice(scores, n, "scores")?)?;
        *out_ref(out, "out")? = eval::roc_auc(&recs)?;
        Ok(())
    })
}

/// Fuses two detectors' outputs for one sample. Either mask may be NULL;
/// when both are given they must hold `mask_len` probabilities and the fused
/// mask is written to `mask_out` (which may then not be NULL).
///
/// # Safety
/// Non-NULL buffers must hold `mask_len` floats.
#[no_mangle]
pub unsafe extern "C" fn edgedoc_fuse(
    score_a: f32,
    mask_a: *const f32,
    score_b: f32,
    mask_b: *const f32,
    mask_len: usize,
    weight: f32,
    alpha: f32,
    score_out: *mut f32,
    mask_out: *mut f32,
) -> EdgedocStatus {
    guard(|| {
        let det = |score: f32, mask: *const f32| -> Result<Detection, Fail> {
            let mask = if mask.is_null() || mask_len == 0 {
                None
            } else {
                Some(Plane::new(1, mask_len, input_slice(mask, mask_len, "mask")?.to_vec()))
            };
            Ok(Detection {
                id: String::new(),
                label: 0,
                score,
                mask,
            })
        };
        let fused = eval::fuse(&[det(score_a, mask_a)?], &[det(score_b, mask_b)?], weight, alpha)?.remove(0);
        *out_ref(score_out, "score_out")? = fused.score;
        if let Some(m) = fused.mask {
            output_slice(mask_out, mask_len, "mask_out")?.copy_from_slice(&m.data);
        }
        Ok(())
    })
}
