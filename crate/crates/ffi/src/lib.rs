//! C ABI for the point-cloud attribution toolkit.
//!
//! Handles are opaque pointers created by `_load` functions and released by
//! the matching `_free`; every other call returns a status code and writes
//! results through caller-owned buffers. Point clouds cross the boundary as
//! packed doubles `[x0, y0, z0, x1, y1, z1, ...]`. On any failure the
//! thread-local message behind [`infocons_last_error`] explains what went
//! wrong.
//!
//! The generated header lands in `include/infocons.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use infocons::explain::{dynamic_score_map, load_explainer, score_map, BottleneckParams};
use infocons::model::{load_model, ModelHandle};
use infocons::shapes::PointCloud;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InfoconsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    IoError = 3,
    NumericError = 4,
    Panic = 5,
}

/// Opaque trained classifier handle.
pub struct InfoconsModel {
    handle: ModelHandle,
}

/// Opaque trained explainer handle.
pub struct InfoconsExplainer {
    theta: BottleneckParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn guard<F: FnOnce() -> InfoconsStatus>(f: F) -> InfoconsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            InfoconsStatus::Panic
        }
    }
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread; never free
/// it.
#[no_mangle]
pub extern "C" fn infocons_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string; never free it.
#[no_mangle]
pub extern "C" fn infocons_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn path_from<'a>(ptr: *const c_char) -> Option<&'a Path> {
    if ptr.is_null() {
        return None;
    }
    CStr::from_ptr(ptr).to_str().ok().map(Path::new)
}

unsafe fn cloud_from(xyz: *const f64, n_points: usize) -> Option<PointCloud> {
    if xyz.is_null() || n_points == 0 {
        return None;
    }
    let flat = std::slice::from_raw_parts(xyz, n_points * 3);
    let points = flat
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect::<Vec<_>>();
    Some(PointCloud::new(points))
}

/// Load a model checkpoint written by the `train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer; the
/// returned handle must be released with [`infocons_model_free`].
#[no_mangle]
pub unsafe extern "C" fn infocons_model_load(
    path: *const c_char,
    out: *mut *mut InfoconsModel,
) -> InfoconsStatus {
    guard(|| {
        if out.is_null() {
            set_error("out pointer is null");
            return InfoconsStatus::NullArgument;
        }
        let Some(path) = path_from(path) else {
            set_error("path is null or not UTF-8");
            return InfoconsStatus::NullArgument;
        };
        match load_model(path) {
            Ok(params) => {
                let boxed = Box::new(InfoconsModel {
                    handle: ModelHandle::new(params),
                });
                *out = Box::into_raw(boxed);
                InfoconsStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                InfoconsStatus::IoError
            }
        }
    })
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must have come from [`infocons_model_load`] and not been freed.
#[no_mangle]
pub unsafe extern "C" fn infocons_model_free(model: *mut InfoconsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes the model predicts.
///
/// # Safety
/// `model` must be a live handle (null returns 0).
#[no_mangle]
pub unsafe extern "C" fn infocons_model_classes(model: *const InfoconsModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).handle.params().classes
}

/// Smallest cloud the model accepts.
///
/// # Safety
/// `model` must be a live handle (null returns 0).
#[no_mangle]
pub unsafe extern "C" fn infocons_model_min_points(model: *const InfoconsModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).handle.params().min_points()
}

/// Class probabilities for a cloud. `probs_out` receives
/// `infocons_model_classes` doubles.
///
/// # Safety
/// `xyz` must hold `3 * n_points` doubles; `probs_out` must hold
/// `probs_len` doubles; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn infocons_model_classify(
    model: *const InfoconsModel,
    xyz: *const f64,
    n_points: usize,
    probs_out: *mut f64,
    probs_len: usize,
) -> InfoconsStatus {
    guard(|| {
        if model.is_null() || probs_out.is_null() {
            set_error("model or output pointer is null");
            return InfoconsStatus::NullArgument;
        }
        let model = &*model;
        let classes = model.handle.params().classes;
        if probs_len < classes {
            set_error("probability buffer too small");
            return InfoconsStatus::InvalidArgument;
        }
        let Some(pc) = cloud_from(xyz, n_points) else {
            set_error("cloud pointer is null or empty");
            return InfoconsStatus::NullArgument;
        };
        match model.handle.classify(&pc) {
            Ok(probs) => {
                std::slice::from_raw_parts_mut(probs_out, classes).copy_from_slice(&probs);
                InfoconsStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                InfoconsStatus::InvalidArgument
            }
        }
    })
}

/// Load an explainer checkpoint written by the `train-explainer` command.
///
/// # Safety
/// As for [`infocons_model_load`]; release with
/// [`infocons_explainer_free`].
#[no_mangle]
pub unsafe extern "C" fn infocons_explainer_load(
    path: *const c_char,
    out: *mut *mut InfoconsExplainer,
) -> InfoconsStatus {
    guard(|| {
        if out.is_null() {
            set_error("out pointer is null");
            return InfoconsStatus::NullArgument;
        }
        let Some(path) = path_from(path) else {
            set_error("path is null or not UTF-8");
            return InfoconsStatus::NullArgument;
        };
        match load_explainer(path) {
            Ok(theta) => {
                *out = Box::into_raw(Box::new(InfoconsExplainer { theta }));
                InfoconsStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                InfoconsStatus::IoError
            }
        }
    })
}

/// Release an explainer handle. Null is a no-op.
///
/// # Safety
/// `explainer` must have come from [`infocons_explainer_load`] and not been
/// freed.
#[no_mangle]
pub unsafe extern "C" fn infocons_explainer_free(explainer: *mut InfoconsExplainer) {
    if !explainer.is_null() {
        drop(Box::from_raw(explainer));
    }
}

/// Learned parameter count of the explainer.
///
/// # Safety
/// `explainer` must be a live handle (null returns 0).
#[no_mangle]
pub unsafe extern "C" fn infocons_explainer_param_count(
    explainer: *const InfoconsExplainer,
) -> usize {
    if explainer.is_null() {
        return 0;
    }
    (*explainer).theta.parameter_count()
}

/// One-pass critical-score map: writes one score in [0, 1] per point into
/// `scores_out`.
///
/// # Safety
/// `xyz` must hold `3 * n_points` doubles and `scores_out` `n_points`
/// doubles; both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn infocons_score_map(
    model: *const InfoconsModel,
    explainer: *const InfoconsExplainer,
    xyz: *const f64,
    n_points: usize,
    scores_out: *mut f64,
) -> InfoconsStatus {
    score_map_impl(model, explainer, xyz, n_points, 0, 0, scores_out)
}

/// Iterated explain-then-drop score map (`iters` passes dropping
/// `drop_per_iter` points each).
///
/// # Safety
/// As for [`infocons_score_map`].
#[no_mangle]
pub unsafe extern "C" fn infocons_score_map_dynamic(
    model: *const InfoconsModel,
    explainer: *const InfoconsExplainer,
    xyz: *const f64,
    n_points: usize,
    iters: usize,
    drop_per_iter: usize,
    scores_out: *mut f64,
) -> InfoconsStatus {
    score_map_impl(model, explainer, xyz, n_points, iters, drop_per_iter, scores_out)
}

unsafe fn score_map_impl(
    model: *const InfoconsModel,
    explainer: *const InfoconsExplainer,
    xyz: *const f64,
    n_points: usize,
    iters: usize,
    drop_per_iter: usize,
    scores_out: *mut f64,
) -> InfoconsStatus {
    guard(|| {
        if model.is_null() || explainer.is_null() || scores_out.is_null() {
            set_error("null handle or output pointer");
            return InfoconsStatus::NullArgument;
        }
        let model = &*model;
        let explainer = &*explainer;
        let Some(pc) = cloud_from(xyz, n_points) else {
            set_error("cloud pointer is null or empty");
            return InfoconsStatus::NullArgument;
        };
        let result = if iters == 0 {
            score_map(&explainer.theta, &model.handle, &pc)
        } else {
            dynamic_score_map(&explainer.theta, &model.handle, &pc, iters, drop_per_iter)
                .map(|(sm, _)| sm)
        };
        match result {
            Ok(sm) => {
                std::slice::from_raw_parts_mut(scores_out, n_points).copy_from_slice(&sm.scores);
                InfoconsStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                InfoconsStatus::NumericError
            }
        }
    })
}

/// Critical subset from the final max pooling: writes up to `cap` point
/// indices and stores the true subset size in `len_out` (call with
/// `cap = 0` to query the size first; indices arrive in ascending order).
///
/// # Safety
/// `idx_out` must hold `cap` entries when `cap > 0`; `len_out` must be a
/// valid pointer; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn infocons_critical_subset(
    model: *const InfoconsModel,
    xyz: *const f64,
    n_points: usize,
    idx_out: *mut usize,
    cap: usize,
    len_out: *mut usize,
) -> InfoconsStatus {
    guard(|| {
        if model.is_null() || len_out.is_null() {
            set_error("null handle or length pointer");
            return InfoconsStatus::NullArgument;
        }
        let model = &*model;
        let Some(pc) = cloud_from(xyz, n_points) else {
            set_error("cloud pointer is null or empty");
            return InfoconsStatus::NullArgument;
        };
        match model.handle.critical_indices(&pc) {
            Ok(idx) => {
                *len_out = idx.len();
                if cap > 0 {
                    if idx_out.is_null() {
                        set_error("index buffer is null");
                        return InfoconsStatus::NullArgument;
                    }
                    let take = idx.len().min(cap);
                    std::slice::from_raw_parts_mut(idx_out, take).copy_from_slice(&idx[..take]);
                }
                InfoconsStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                InfoconsStatus::InvalidArgument
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn version_is_nul_terminated() {
        let v = infocons_version();
        let s = unsafe { CStr::from_ptr(v) };
        assert_eq!(s.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn null_arguments_are_rejected() {
        unsafe {
            let mut out: *mut InfoconsModel = ptr::null_mut();
            assert_eq!(
                infocons_model_load(ptr::null(), &mut out),
                InfoconsStatus::NullArgument
            );
            assert_eq!(
                infocons_model_load(b"x\0".as_ptr() as *const c_char, ptr::null_mut()),
                InfoconsStatus::NullArgument
            );
            infocons_model_free(ptr::null_mut());
            infocons_explainer_free(ptr::null_mut());
            assert_eq!(infocons_model_classes(ptr::null()), 0);
        }
    }

    #[test]
    fn missing_checkpoint_reports_io_error() {
        unsafe {
            let mut out: *mut InfoconsModel = ptr::null_mut();
            let status = infocons_model_load(
                b"/nonexistent/model.ckpt\0".as_ptr() as *const c_char,
                &mut out,
            );
            assert_eq!(status, InfoconsStatus::IoError);
            let msg = CStr::from_ptr(infocons_last_error());
            assert!(!msg.to_bytes().is_empty());
        }
    }
}
