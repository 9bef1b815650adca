//! C ABI for the explanation engine.
//!
//! Conventions:
//! - Every fallible function returns a `cx_status`; `CX_OK` is zero.
//! - On failure, `cx_last_error_message` returns a thread-local description
//!   valid until the next failing call on the same thread.
//! - Handles (`cx_explainer`, `cx_ensemble`) are opaque, created by `_load`
//!   functions and released exactly once with the matching `_free`.
//! - Matrices cross the boundary as row-major `double` buffers; the caller
//!   owns every buffer and must size output buffers as documented.
//! - Passing a null handle, data pointer, or output pointer yields
//!   `CX_INVALID_INPUT`, never a crash.

#![allow(non_camel_case_types)]

use cxplain::blackbox::{BlackBoxModel, EvaluationCounter};
use cxplain::data::{FeatureMatrix, PredictionMatrix, TargetMatrix};
use cxplain::error::{Error, Result};
use cxplain::explainer::{load_explainer, ExplainerModel};
use cxplain::loss::{LossFunction, LossKind};
use cxplain::masking::{FeatureGrouping, MaskingStrategy};
use cxplain::targets::{precompute_targets, NegativeDelta, TargetConfig};
use cxplain::uncertainty::{load_ensemble, BootstrapEnsemble};
use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Result status of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum cx_status {
    /// Success.
    CX_OK = 0,
    /// Bad arguments: null pointers, shape mismatches, unreadable files.
    CX_INVALID_INPUT = 2,
    /// Numeric failure in the model or training.
    CX_NUMERIC = 3,
    /// The operation produced nothing to report.
    CX_EMPTY = 4,
    /// An internal invariant broke; the library state is still consistent.
    CX_PANIC = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized: Vec<u8> = message.bytes().filter(|&b| b != 0).collect();
    let c = CString::new(sanitized).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: cx_status, message: &str) -> cx_status {
    set_error(message);
    status
}

fn status_of(e: &Error) -> cx_status {
    match e.exit_code() {
        3 => cx_status::CX_NUMERIC,
        4 => cx_status::CX_EMPTY,
        _ => cx_status::CX_INVALID_INPUT,
    }
}

fn fail_with(e: Error) -> cx_status {
    let status = status_of(&e);
    set_error(&e.to_string());
    status
}

/// Runs a body, converting panics into `CX_PANIC` instead of unwinding
/// across the C boundary.
fn guarded(f: impl FnOnce() -> cx_status) -> cx_status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(
            cx_status::CX_PANIC,
            "internal panic; see stderr for details",
        ),
    }
}

/// Description of the most recent failure on this thread.
///
/// The pointer stays valid until the next failing call on the same thread.
/// Returns an empty string when no call has failed yet.
#[no_mangle]
pub extern "C" fn cx_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

unsafe fn path_from(ptr: *const c_char, what: &str) -> std::result::Result<String, cx_status> {
    if ptr.is_null() {
        return Err(fail(
            cx_status::CX_INVALID_INPUT,
            &format!("null pointer: {what}"),
        ));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(s.to_string()),
        Err(_) => Err(fail(
            cx_status::CX_INVALID_INPUT,
            &format!("{what} is not valid UTF-8"),
        )),
    }
}

macro_rules! require_non_null {
    ($ptr:expr, $what:literal) => {
        if $ptr.is_null() {
            return fail(
                cx_status::CX_INVALID_INPUT,
                concat!("null pointer: ", $what),
            );
        }
    };
}

/// Opaque handle to a trained explainer.
pub struct cx_explainer {
    inner: ExplainerModel,
}

/// Opaque handle to a bootstrap ensemble of explainers.
pub struct cx_ensemble {
    inner: BootstrapEnsemble,
}

/// Loads an explainer saved by the engine (a JSON model file).
///
/// On success writes a handle to `out`; release it with `cx_explainer_free`.
///
/// # Safety
///
/// A non-null `path` must be a readable NUL-terminated string and a
/// non-null `out` must be writable; nulls are caught and reported.
#[no_mangle]
pub unsafe extern "C" fn cx_explainer_load(
    path: *const c_char,
    out: *mut *mut cx_explainer,
) -> cx_status {
    guarded(|| {
        require_non_null!(out, "out");
        let path = match path_from(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_explainer(Path::new(&path)) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(cx_explainer { inner: model }));
                cx_status::CX_OK
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Releases an explainer handle. Passing null is a no-op. The handle must
/// not be used after this call.
///
/// # Safety
///
/// `handle` must be null or a pointer from `cx_explainer_load` that has
/// not already been freed.
#[no_mangle]
pub unsafe extern "C" fn cx_explainer_free(handle: *mut cx_explainer) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Width of the feature vectors the explainer accepts.
///
/// # Safety
///
/// A non-null `handle` must be a live handle from `cx_explainer_load` and
/// a non-null `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cx_explainer_input_dim(
    handle: *const cx_explainer,
    out: *mut usize,
) -> cx_status {
    guarded(|| {
        require_non_null!(handle, "handle");
        require_non_null!(out, "out");
        *out = (*handle).inner.input_dim();
        cx_status::CX_OK
    })
}

/// Number of feature groups in each attribution row.
///
/// # Safety
///
/// A non-null `handle` must be a live handle from `cx_explainer_load` and
/// a non-null `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cx_explainer_num_groups(
    handle: *const cx_explainer,
    out: *mut usize,
) -> cx_status {
    guarded(|| {
        require_non_null!(handle, "handle");
        require_non_null!(out, "out");
        *out = (*handle).inner.num_groups();
        cx_status::CX_OK
    })
}

/// Attributes a batch of inputs.
///
/// `x` is row-major `n_rows x n_cols` with `n_cols` equal to the explainer's
/// input width and `n_rows >= 1`. `out` must hold `n_rows * num_groups`
/// doubles; each written row is a non-negative importance distribution
/// summing to one.
///
/// # Safety
///
/// A non-null `handle` must be live, a non-null `x` must hold
/// `n_rows * n_cols` readable doubles, and a non-null `out` must have room
/// for `n_rows * num_groups` doubles.
#[no_mangle]
pub unsafe extern "C" fn cx_explainer_explain(
    handle: *const cx_explainer,
    x: *const f64,
    n_rows: usize,
    n_cols: usize,
    out: *mut f64,
) -> cx_status {
    guarded(|| {
        require_non_null!(handle, "handle");
        require_non_null!(x, "x");
        require_non_null!(out, "out");
        let model = &(*handle).inner;
        if n_cols != model.input_dim() {
            return fail(
                cx_status::CX_INVALID_INPUT,
                &format!(
                    "input width {n_cols} does not match explainer input width {}",
                    model.input_dim()
                ),
            );
        }
        let data = std::slice::from_raw_parts(x, n_rows.saturating_mul(n_cols)).to_vec();
        let matrix = match FeatureMatrix::new(data, n_rows, n_cols) {
            Ok(m) => m,
            Err(e) => return fail_with(e),
        };
        match model.explain(&matrix) {
            Ok(omega) => {
                let p = model.num_groups();
                for i in 0..n_rows {
                    let row = omega.row(i).as_slice();
                    std::ptr::copy_nonoverlapping(row.as_ptr(), out.add(i * p), p);
                }
                cx_status::CX_OK
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Loads an ensemble directory saved by the engine.
///
/// On success writes a handle to `out`; release it with `cx_ensemble_free`.
///
/// # Safety
///
/// A non-null `dir` must be a readable NUL-terminated string and a
/// non-null `out` must be writable; nulls are caught and reported.
#[no_mangle]
pub unsafe extern "C" fn cx_ensemble_load(
    dir: *const c_char,
    out: *mut *mut cx_ensemble,
) -> cx_status {
    guarded(|| {
        require_non_null!(out, "out");
        let dir = match path_from(dir, "dir") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_ensemble(Path::new(&dir)) {
            Ok(ensemble) => {
                *out = Box::into_raw(Box::new(cx_ensemble { inner: ensemble }));
                cx_status::CX_OK
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Releases an ensemble handle. Passing null is a no-op.
///
/// # Safety
///
/// `handle` must be null or a pointer from `cx_ensemble_load` that has
/// not already been freed.
#[no_mangle]
pub unsafe extern "C" fn cx_ensemble_free(handle: *mut cx_ensemble) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of member explainers in the ensemble.
///
/// # Safety
///
/// A non-null `handle` must be a live handle from `cx_ensemble_load` and
/// a non-null `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cx_ensemble_num_members(
    handle: *const cx_ensemble,
    out: *mut usize,
) -> cx_status {
    guarded(|| {
        require_non_null!(handle, "handle");
        require_non_null!(out, "out");
        *out = (*handle).inner.num_members();
        cx_status::CX_OK
    })
}

/// Width of the feature vectors the ensemble accepts.
///
/// # Safety
///
/// A non-null `handle` must be a live handle from `cx_ensemble_load` and
/// a non-null `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cx_ensemble_input_dim(
    handle: *const cx_ensemble,
    out: *mut usize,
) -> cx_status {
    guarded(|| {
        require_non_null!(handle, "handle");
        require_non_null!(out, "out");
        *out = (*handle).inner.members()[0].input_dim();
        cx_status::CX_OK
    })
}

/// Number of feature groups in each attribution row.
///
/// # Safety
///
/// A non-null `handle` must be a live handle from `cx_ensemble_load` and
/// a non-null `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cx_ensemble_num_groups(
    handle: *const cx_ensemble,
    out: *mut usize,
) -> cx_status {
    guarded(|| {
        require_non_null!(handle, "handle");
        require_non_null!(out, "out");
        *out = (*handle).inner.members()[0].num_groups();
        cx_status::CX_OK
    })
}

/// Attributes one input with per-group uncertainty.
///
/// `x_row` has `n_cols` doubles matching the ensemble's input width, and
/// `gamma` in (0, 1) is the central confidence mass. `median`, `lower`, and
/// `upper` each receive `num_groups` doubles; any of them may be null to
/// skip that output.
///
/// # Safety
///
/// A non-null `handle` must be live, a non-null `x_row` must hold
/// `n_cols` readable doubles, and each non-null output pointer must have
/// room for `num_groups` doubles.
#[no_mangle]
pub unsafe extern "C" fn cx_ensemble_attribute(
    handle: *const cx_ensemble,
    x_row: *const f64,
    n_cols: usize,
    gamma: f64,
    median: *mut f64,
    lower: *mut f64,
    upper: *mut f64,
) -> cx_status {
    guarded(|| {
        require_non_null!(handle, "handle");
        require_non_null!(x_row, "x_row");
        let ensemble = &(*handle).inner;
        let expected = ensemble.members()[0].input_dim();
        if n_cols != expected {
            return fail(
                cx_status::CX_INVALID_INPUT,
                &format!("input width {n_cols} does not match ensemble input width {expected}"),
            );
        }
        let row = std::slice::from_raw_parts(x_row, n_cols);
        match ensemble.attribute(row, gamma) {
            Ok(ci) => {
                let p = ci.median.len();
                if !median.is_null() {
                    std::ptr::copy_nonoverlapping(ci.median.as_ptr(), median, p);
                }
                if !lower.is_null() {
                    std::ptr::copy_nonoverlapping(ci.lower.as_ptr(), lower, p);
                }
                if !upper.is_null() {
                    std::ptr::copy_nonoverlapping(ci.upper.as_ptr(), upper, p);
                }
                cx_status::CX_OK
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Prediction error measure used when scoring masked inputs.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum cx_loss {
    CX_LOSS_MEAN_SQUARED_ERROR = 0,
    CX_LOSS_CATEGORICAL_CROSSENTROPY = 1,
    CX_LOSS_BINARY_CROSSENTROPY = 2,
}

/// Replacement values used when a feature group is masked out.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum cx_masking {
    /// Masked features become zero.
    CX_MASKING_ZERO = 0,
    /// Masked features become their per-column mean over `x`.
    CX_MASKING_DATASET_MEAN = 1,
}

/// Treatment of groups whose masking decreases the prediction error.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum cx_negative_delta {
    /// Clip to zero: a group only earns importance by hurting the model.
    CX_NEGATIVE_DELTA_FLOOR = 0,
    /// Use the magnitude: any effect on the error counts as importance.
    CX_NEGATIVE_DELTA_ABS = 1,
}

/// Batch prediction callback for a caller-owned model.
///
/// `x` is row-major `n_rows x n_cols`; the callback must write
/// `n_rows * output_dim` doubles to `out` (the `output_dim` passed to
/// `cx_precompute_targets`) and return zero. A non-zero return aborts the
/// sweep and surfaces as `CX_NUMERIC`. Calls arrive strictly sequentially
/// on the thread that invoked the engine, so the callback needs no locking.
pub type cx_predict_fn = Option<
    unsafe extern "C" fn(
        user_data: *mut c_void,
        x: *const f64,
        n_rows: usize,
        n_cols: usize,
        out: *mut f64,
    ) -> i32,
>;

struct CallbackModel {
    predict: unsafe extern "C" fn(*mut c_void, *const f64, usize, usize, *mut f64) -> i32,
    user_data: *mut c_void,
    output_dim: usize,
    counter: EvaluationCounter,
}

// The engine treats serial models as single-threaded: every predict call
// happens on the thread that entered the engine, so the raw pointer never
// crosses threads while in use.
unsafe impl Send for CallbackModel {}
unsafe impl Sync for CallbackModel {}

impl BlackBoxModel for CallbackModel {
    fn name(&self) -> &str {
        "c_callback"
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn predict(&self, x: &FeatureMatrix) -> Result<PredictionMatrix> {
        let n = x.rows();
        let mut out = vec![0.0; n * self.output_dim];
        let code = unsafe {
            (self.predict)(
                self.user_data,
                x.as_slice().as_ptr(),
                n,
                x.cols(),
                out.as_mut_ptr(),
            )
        };
        if code != 0 {
            return Err(Error::Contract(format!(
                "prediction callback returned non-zero status {code}"
            )));
        }
        self.counter.add(n as u64);
        PredictionMatrix::new(out, n, self.output_dim)
    }

    fn evaluations(&self) -> u64 {
        self.counter.get()
    }

    fn is_serial(&self) -> bool {
        true
    }

    fn fingerprint(&self) -> String {
        format!("c_callback(k={})", self.output_dim)
    }
}

fn loss_kind(loss: cx_loss) -> LossKind {
    match loss {
        cx_loss::CX_LOSS_MEAN_SQUARED_ERROR => LossKind::MeanSquaredError,
        cx_loss::CX_LOSS_CATEGORICAL_CROSSENTROPY => LossKind::CategoricalCrossentropy,
        cx_loss::CX_LOSS_BINARY_CROSSENTROPY => LossKind::BinaryCrossentropy,
    }
}

/// Computes per-feature importance targets by masked re-evaluation.
///
/// `x` is row-major `n_rows x n_cols` (`n_rows >= 1`, `n_cols >= 1`) and
/// `y` is row-major `n_rows x y_cols` holding the labels the loss compares
/// against; `output_dim` is the width of each prediction row and must equal
/// `y_cols`. Each feature forms its own group, masked by `masking`. The
/// callback is invoked with batches of `n_cols + 1` rows, once per input
/// row, for exactly `n_rows * (n_cols + 1)` sample evaluations.
///
/// `omega_out` must hold `n_rows * n_cols` doubles and receives one
/// importance distribution per input row. `evaluations_out`, if non-null,
/// receives the total sample-evaluation count.
///
/// # Safety
///
/// Non-null buffers must match the sizes above (`x` and `omega_out` at
/// `n_rows * n_cols`, `y` at `n_rows * y_cols`, `evaluations_out` one
/// `u64`), and the callback must honor its own contract for the duration
/// of the call.
#[no_mangle]
pub unsafe extern "C" fn cx_precompute_targets(
    predict: cx_predict_fn,
    user_data: *mut c_void,
    output_dim: usize,
    x: *const f64,
    n_rows: usize,
    n_cols: usize,
    y: *const f64,
    y_cols: usize,
    loss: cx_loss,
    masking: cx_masking,
    negative_delta: cx_negative_delta,
    omega_out: *mut f64,
    evaluations_out: *mut u64,
) -> cx_status {
    guarded(|| {
        let predict = match predict {
            Some(f) => f,
            None => return fail(cx_status::CX_INVALID_INPUT, "null pointer: predict"),
        };
        require_non_null!(x, "x");
        require_non_null!(y, "y");
        require_non_null!(omega_out, "omega_out");
        if output_dim != y_cols {
            return fail(
                cx_status::CX_INVALID_INPUT,
                &format!("output_dim {output_dim} does not match y_cols {y_cols}"),
            );
        }
        let x_data = std::slice::from_raw_parts(x, n_rows.saturating_mul(n_cols)).to_vec();
        let x_matrix = match FeatureMatrix::new(x_data, n_rows, n_cols) {
            Ok(m) => m,
            Err(e) => return fail_with(e),
        };
        let y_data = std::slice::from_raw_parts(y, n_rows.saturating_mul(y_cols)).to_vec();
        let y_matrix = match TargetMatrix::new(y_data, n_rows, y_cols) {
            Ok(m) => m,
            Err(e) => return fail_with(e),
        };
        let grouping = match FeatureGrouping::identity(n_cols) {
            Ok(g) => g,
            Err(e) => return fail_with(e),
        };
        let strategy = match masking {
            cx_masking::CX_MASKING_ZERO => MaskingStrategy::Zero,
            cx_masking::CX_MASKING_DATASET_MEAN => MaskingStrategy::dataset_mean(&x_matrix),
        };
        let model = CallbackModel {
            predict,
            user_data,
            output_dim,
            counter: EvaluationCounter::new(),
        };
        let config = TargetConfig {
            loss: LossFunction::new(loss_kind(loss)),
            negative_delta: match negative_delta {
                cx_negative_delta::CX_NEGATIVE_DELTA_FLOOR => NegativeDelta::Floor,
                cx_negative_delta::CX_NEGATIVE_DELTA_ABS => NegativeDelta::Abs,
            },
        };
        match precompute_targets(&model, &x_matrix, &y_matrix, &grouping, &strategy, &config) {
            Ok(t) => {
                for i in 0..n_rows {
                    let row = t.omega.row(i).as_slice();
                    std::ptr::copy_nonoverlapping(row.as_ptr(), omega_out.add(i * n_cols), n_cols);
                }
                if !evaluations_out.is_null() {
                    *evaluations_out = t.evaluations;
                }
                cx_status::CX_OK
            }
            Err(e) => fail_with(e),
        }
    })
}
