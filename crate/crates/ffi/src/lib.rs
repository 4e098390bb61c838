//! C ABI over the deepcuts library.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns a
//! [`DcStatus`]; on failure the message is available from
//! [`dc_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use deepcuts::analysis::{compare_masks, HeadMap};
use deepcuts::commands::{cmd_run, RunOptions};
use deepcuts::config::RunConfig;
use deepcuts::masking::{build_mask, read_mask, write_mask, CompressionSpec, PruneMask};
use deepcuts::nn::{read_checkpoint, write_checkpoint, Model, ModelSpec};
use deepcuts::strategies::{read_scores, ImportanceAccumulator};
use deepcuts::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Numeric = 5,
    Infeasible = 6,
    Io = 7,
    Format = 8,
    Consistency = 9,
    Internal = 10,
}

impl DcStatus {
    fn of(e: &Error) -> Self {
        match e.root() {
            Error::Config { .. } => DcStatus::Config,
            Error::Argument(_) | Error::Validation(_) | Error::Dimension(_) | Error::Size(_) => {
                DcStatus::InvalidArgument
            }
            Error::Data(_) => DcStatus::Data,
            Error::Numeric { .. } | Error::Training { .. } => DcStatus::Numeric,
            Error::Infeasible { .. } => DcStatus::Infeasible,
            Error::Io { .. } => DcStatus::Io,
            Error::Format(_) => DcStatus::Format,
            Error::Consistency(_) => DcStatus::Consistency,
            _ => DcStatus::Internal,
        }
    }
}

/// Opaque model handle.
pub struct DcModel(Model);

/// Opaque pruning mask handle.
pub struct DcMask(PruneMask);

/// Opaque importance-score handle.
pub struct DcScores(ImportanceAccumulator);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

struct Fail(DcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let mut msg = e.to_string();
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            if !msg.contains(&s.to_string()) {
                msg.push_str(&format!(": {s}"));
            }
            source = s.source();
        }
        Fail(DcStatus::of(&e), msg)
    }
}

fn null(what: &str) -> Fail {
    Fail(DcStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DcStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DcStatus::Internal
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DcStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn path(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    text(p, what).map(PathBuf::from)
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Message of the last failed call on this thread, or null if none.
/// The pointer stays valid until the next failing call on the thread.
#[no_mangle]
pub extern "C" fn dc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Kept fraction of prunable weights for a compression ratio.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_kept_fraction(ratio: f64, n_total: u64, n_prunable: u64, out: *mut f64) -> DcStatus {
    guard(|| {
        let f = CompressionSpec::new(ratio, n_total as usize, n_prunable as usize).kept_fraction()?;
        write_out(out, f, "out")
    })
}

/// Builds a freshly initialised model from run-config text (only the
/// `task.*` and `model.*` keys matter).
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dc_model_new(config: *const c_char, seed: u64, out: *mut *mut DcModel) -> DcStatus {
    guard(|| {
        let spec = RunConfig::parse(text(config, "config")?)?.model;
        let model = Model::new(spec, seed)?;
        write_out(out, boxed(DcModel(model)), "out")
    })
}

/// Loads a checkpoint written by `dc_model_save` or by a pipeline run.
///
/// # Safety
/// `file` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dc_model_load(file: *const c_char, out: *mut *mut DcModel) -> DcStatus {
    guard(|| {
        let ckpt = read_checkpoint(&path(file, "file")?)?;
        let spec: ModelSpec = serde_json::from_str::<serde_json::Value>(&ckpt.provenance)
            .ok()
            .and_then(|v| serde_json::from_value(v.get("model")?.clone()).ok())
            .ok_or_else(|| Fail(DcStatus::Format, "checkpoint does not record its model spec".into()))?;
        let mut model = Model::new(spec, 0)?;
        ckpt.apply_to(&mut model)?;
        write_out(out, boxed(DcModel(model)), "out")
    })
}

/// Writes the model as a checkpoint that `dc_model_load` can read.
///
/// # Safety
/// `model` must be a live handle and `file` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dc_model_save(model: *const DcModel, file: *const c_char) -> DcStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        let provenance = serde_json::json!({ "model": model.spec() }).to_string();
        write_checkpoint(model, &path(file, "file")?, &provenance)?;
        Ok(())
    })
}

/// Total and prunable parameter counts.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_model_counts(model: *const DcModel, n_total: *mut u64, n_prunable: *mut u64) -> DcStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        write_out(n_total, model.n_total() as u64, "n_total")?;
        write_out(n_prunable, model.n_prunable() as u64, "n_prunable")
    })
}

/// Zeroes the weights the mask removes.
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn dc_model_apply_mask(model: *mut DcModel, mask: *const DcMask) -> DcStatus {
    guard(|| {
        let mask = &handle(mask, "mask")?.0;
        let model = &mut model.as_mut().ok_or_else(|| null("model"))?.0;
        deepcuts::masking::apply_mask(model, mask)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dc_model_free(model: *mut DcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Reads a mask file.
///
/// # Safety
/// `file` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dc_mask_read(file: *const c_char, out: *mut *mut DcMask) -> DcStatus {
    guard(|| {
        let mask = read_mask(&path(file, "file")?)?;
        write_out(out, boxed(DcMask(mask)), "out")
    })
}

/// # Safety
/// `mask` must be a live handle and `file` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dc_mask_write(mask: *const DcMask, file: *const c_char) -> DcStatus {
    guard(|| {
        write_mask(&handle(mask, "mask")?.0, &path(file, "file")?)?;
        Ok(())
    })
}

/// Kept and total element counts over every masked tensor.
///
/// # Safety
/// `mask` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_mask_counts(mask: *const DcMask, kept: *mut u64, total: *mut u64) -> DcStatus {
    guard(|| {
        let mask = &handle(mask, "mask")?.0;
        write_out(kept, mask.kept_total() as u64, "kept")?;
        write_out(total, mask.element_total() as u64, "total")
    })
}

/// Mean and minimum per-tensor intersection-over-union of two masks.
///
/// # Safety
/// Both handles must be live; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_mask_iou(
    a: *const DcMask,
    b: *const DcMask,
    mean_iou: *mut f64,
    min_iou: *mut f64,
) -> DcStatus {
    guard(|| {
        let c = compare_masks(&handle(a, "a")?.0, &handle(b, "b")?.0, &HeadMap::default())?;
        write_out(mean_iou, c.mean_iou, "mean_iou")?;
        write_out(min_iou, c.min_iou, "min_iou")
    })
}

/// # Safety
/// `mask` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dc_mask_free(mask: *mut DcMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Reads an importance-score file.
///
/// # Safety
/// `file` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dc_scores_read(file: *const c_char, out: *mut *mut DcScores) -> DcStatus {
    guard(|| {
        let acc = read_scores(&path(file, "file")?)?;
        write_out(out, boxed(DcScores(acc)), "out")
    })
}

/// Builds the mask the scoring strategy prescribes at `ratio`.
///
/// # Safety
/// `scores` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dc_scores_build_mask(scores: *const DcScores, ratio: f64, out: *mut *mut DcMask) -> DcStatus {
    guard(|| {
        let acc = &handle(scores, "scores")?.0;
        if !(ratio.is_finite() && ratio >= 1.0) {
            return Err(Fail(DcStatus::InvalidArgument, format!("compression ratio {ratio} must be >= 1")));
        }
        let spec = CompressionSpec::new(ratio, acc.n_total, acc.n_prunable());
        let mask = build_mask(acc, &spec)?;
        write_out(out, boxed(DcMask(mask)), "out")
    })
}

/// # Safety
/// `scores` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dc_scores_free(scores: *mut DcScores) {
    if !scores.is_null() {
        drop(Box::from_raw(scores));
    }
}

/// Runs the full sweep described by a config file. `out_dir` may be null
/// to keep the config's own output directory.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out_dir` null or one.
#[no_mangle]
pub unsafe extern "C" fn dc_run(config_path: *const c_char, out_dir: *const c_char, jobs: u32) -> DcStatus {
    guard(|| {
        let mut overrides = Vec::new();
        if !out_dir.is_null() {
            overrides.push(format!("out={}", text(out_dir, "out_dir")?));
        }
        let config = RunConfig::load(&path(config_path, "config_path")?, &overrides)?;
        cmd_run(
            &config,
            RunOptions {
                jobs: jobs.max(1) as usize,
                resume: false,
            },
        )?;
        Ok(())
    })
}
