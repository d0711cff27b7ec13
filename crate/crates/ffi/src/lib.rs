//! C ABI over the toy-model estimators and the statistics helpers.
//!
//! Every function returns a [`DregStatus`]; on failure a description is
//! kept per thread and can be copied out with [`dreg_last_error_message`].
//! Handles are opaque and must be released with [`dreg_toy_free`].

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use dreg_lab::diagnostics::{loglog_slope, paired_t_test};
use dreg_lab::estimators::{estimate, log_weights, EstimatorId};
use dreg_lab::gaussian::NoiseBatch;
use dreg_lab::models::{ParamVector, ToyModel};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DregStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    BufferTooSmall = 4,
    Panic = 5,
}

/// Linear-Gaussian model with fixed parameters.
pub struct DregToy {
    model: ToyModel,
    params: ParamVector,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: DregStatus, msg: impl Into<String>) -> DregStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard(f: impl FnOnce() -> DregStatus) -> DregStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == DregStatus::Ok {
                LAST_ERROR.with(|e| e.borrow_mut().clear());
            }
            s
        }
        Err(_) => fail(DregStatus::Panic, "internal panic"),
    }
}

/// # Safety
/// `ptr` must be null or point to `len` readable values.
unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], DregStatus> {
    if ptr.is_null() {
        return Err(fail(DregStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Copies the calling thread's last error message, NUL-terminated, into
/// `buf`. Returns the message length in bytes excluding the terminator;
/// when that is `>= len` the message was truncated.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dreg_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn dreg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a `dim`-dimensional model at the optimal inference network for
/// `theta`, with Gaussian noise of standard deviation `perturbation` added
/// to every parameter from stream `seed`. `q_variance <= 0` selects the
/// default inference variance.
///
/// # Safety
/// `theta` must point to `dim` values and `out` to a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dreg_toy_new(
    dim: usize,
    q_variance: f64,
    theta: *const f64,
    perturbation: f64,
    seed: u64,
    out: *mut *mut DregToy,
) -> DregStatus {
    guard(|| {
        if out.is_null() {
            return fail(DregStatus::NullPointer, "out is null");
        }
        if dim == 0 || !(perturbation >= 0.0) || q_variance.is_nan() {
            return fail(DregStatus::InvalidArgument, "dim must be positive and perturbation >= 0");
        }
        let theta = match slice(theta, dim, "theta") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let mut model = ToyModel::new(dim);
        if q_variance > 0.0 {
            model = model.with_q_variance(q_variance);
        }
        let params = match model.optimal_params(theta) {
            Ok(p) => p.perturbed(perturbation, seed, 0),
            Err(e) => return fail(DregStatus::InvalidArgument, e.to_string()),
        };
        *out = Box::into_raw(Box::new(DregToy { model, params }));
        DregStatus::Ok
    })
}

/// # Safety
/// `handle` must be null or come from [`dreg_toy_new`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn dreg_toy_free(handle: *mut DregToy) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of inference-network coordinates, the length of every gradient
/// written by [`dreg_toy_estimate`]. Zero for a null handle.
///
/// # Safety
/// `handle` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn dreg_toy_num_phi(handle: *const DregToy) -> usize {
    handle.as_ref().map_or(0, |h| h.params.phi_indices().len())
}

/// One inference-network gradient draw of the named estimator (for
/// example `"iwae-dreg"`) with `k` samples taken from batch `draw` of
/// stream `seed`. `alpha` is read only for `"dreg-alpha"`.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `name` must be
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dreg_toy_estimate(
    handle: *const DregToy,
    name: *const c_char,
    alpha: f64,
    x: *const f64,
    x_len: usize,
    k: usize,
    seed: u64,
    draw: u64,
    out: *mut f64,
    out_len: usize,
) -> DregStatus {
    guard(|| {
        let Some(h) = handle.as_ref() else {
            return fail(DregStatus::NullPointer, "handle is null");
        };
        if name.is_null() || out.is_null() {
            return fail(DregStatus::NullPointer, "name or out is null");
        }
        let x = match slice(x, x_len, "x") {
            Ok(x) => x,
            Err(s) => return s,
        };
        let id: EstimatorId = match CStr::from_ptr(name).to_str().ok().and_then(|s| s.parse().ok()) {
            Some(id) => id,
            None => return fail(DregStatus::InvalidArgument, "unknown estimator name"),
        };
        if k < id.min_k() {
            return fail(DregStatus::InvalidArgument, format!("{id} needs K >= {}", id.min_k()));
        }
        let need = h.params.phi_indices().len();
        if out_len < need {
            return fail(DregStatus::BufferTooSmall, format!("out needs {need} entries"));
        }
        let eps = NoiseBatch::draw(seed, 0, draw, k, h.model.dim());
        let alpha = (id == EstimatorId::DregAlpha).then_some(alpha);
        let g = log_weights(&h.model, &h.params, x, &eps).and_then(|lw| estimate(id, alpha, &lw));
        match g {
            Ok(g) => {
                std::ptr::copy_nonoverlapping(g.phi_grad.as_ptr(), out, need);
                DregStatus::Ok
            }
            Err(e) => fail(DregStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Exact `log p(x)` of the model.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dreg_toy_log_marginal(
    handle: *const DregToy,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
) -> DregStatus {
    guard(|| {
        let Some(h) = handle.as_ref() else {
            return fail(DregStatus::NullPointer, "handle is null");
        };
        if out.is_null() {
            return fail(DregStatus::NullPointer, "out is null");
        }
        let x = match slice(x, x_len, "x") {
            Ok(x) => x,
            Err(s) => return s,
        };
        match h.model.log_marginal(&h.params, x) {
            Ok(v) => {
                *out = v;
                DregStatus::Ok
            }
            Err(e) => fail(DregStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Two-sided paired t-test of `a` against `b`.
///
/// # Safety
/// `a` and `b` must point to `n` values; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dreg_paired_t_test(
    a: *const f64,
    b: *const f64,
    n: usize,
    out_t: *mut f64,
    out_p: *mut f64,
) -> DregStatus {
    guard(|| {
        if out_t.is_null() || out_p.is_null() {
            return fail(DregStatus::NullPointer, "outputs are null");
        }
        let (a, b) = match (slice(a, n, "a"), slice(b, n, "b")) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match paired_t_test(a, b) {
            Ok(r) => {
                *out_t = r.t;
                *out_p = r.p_value;
                DregStatus::Ok
            }
            Err(e) => fail(DregStatus::Numerical, e.to_string()),
        }
    })
}

/// Least-squares slope of `ln(stat)` against `ln(k)`.
///
/// # Safety
/// `k` and `stat` must point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dreg_loglog_slope(k: *const f64, stat: *const f64, n: usize, out: *mut f64) -> DregStatus {
    guard(|| {
        if out.is_null() {
            return fail(DregStatus::NullPointer, "out is null");
        }
        let (k, s) = match (slice(k, n, "k"), slice(stat, n, "stat")) {
            (Ok(k), Ok(s)) => (k, s),
            (Err(e), _) | (_, Err(e)) => return e,
        };
        let points: Vec<(f64, f64)> = k.iter().copied().zip(s.iter().copied()).collect();
        match loglog_slope(&points) {
            Ok(f) => {
                *out = f.slope;
                DregStatus::Ok
            }
            Err(e) => fail(DregStatus::Numerical, e.to_string()),
        }
    })
}
