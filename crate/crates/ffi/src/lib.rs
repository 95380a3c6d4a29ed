//! C interface to `wml-core`.
//!
//! Objects are opaque handles created by `wml_*_new`-style constructors and
//! released with the matching `wml_*_free`. Every fallible call returns a
//! [`WmlStatus`]; on failure [`wml_last_error_message`] describes the cause.
//! Panics never cross the boundary and are reported as [`WmlStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use wml_core::operators::{square_fn, weighted_square_fn};
use wml_core::principal::{default_cgamma, sparse_domination_check};
use wml_core::weights::{ap_characteristic, MatrixWeight, ReducerOptions, ReducingPair};
use wml_core::{martingale_of, Error, FilteredSpace, LeafFunction, Mat, TreeSpec};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WmlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Validation = 3,
    NonConvergence = 4,
    Panic = 5,
}

/// A finite filtered probability space.
pub struct WmlSpace(FilteredSpace);

/// A matrix weight, one symmetric positive definite `d × d` matrix per leaf.
pub struct WmlWeight(MatrixWeight);

/// A `d`-vector valued function on the leaves.
pub struct WmlFunction(LeafFunction);

/// Outcome of the pointwise domination check.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct WmlDominationReport {
    pub max_ratio: f64,
    pub bound: f64,
    /// Leaves where the square function is positive but the sparse bound vanishes.
    pub unbounded_leaves: usize,
    pub pass: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn status_of(f: Fail) -> WmlStatus {
    match f {
        Fail::Null(what) => {
            set_error(format!("null pointer: {what}"));
            WmlStatus::NullPointer
        }
        Fail::Arg(msg) => {
            set_error(msg);
            WmlStatus::InvalidArgument
        }
        Fail::Core(e) => {
            set_error(e.to_string());
            match e {
                Error::ReducerNonConvergence { .. } | Error::EstimatorNonConvergence { .. } => WmlStatus::NonConvergence,
                _ => WmlStatus::Validation,
            }
        }
    }
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> WmlStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            WmlStatus::Ok
        }
        Ok(Err(f)) => status_of(f),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            WmlStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(ptr: *const T, what: &'static str) -> Result<&'a T, Fail> {
    ptr.as_ref().ok_or(Fail::Null(what))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn slice<'a>(data: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn write_leaves(values: &[f64], out: *mut f64, len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    if len != values.len() {
        return Err(Fail::Arg(format!("output buffer holds {len} values, {} needed", values.len())));
    }
    std::slice::from_raw_parts_mut(out, len).copy_from_slice(values);
    Ok(())
}

fn check_p(p: f64) -> Result<(), Fail> {
    if p.is_finite() && p > 1.0 {
        Ok(())
    } else {
        Err(Fail::Arg(format!("exponent p = {p} must lie in (1, ∞)")))
    }
}

/// Message for the most recent failed call on this thread; empty after a
/// successful call. The pointer stays valid until the next `wml_*` call on
/// the same thread.
#[no_mangle]
pub extern "C" fn wml_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Uniform dyadic space of the given depth.
///
/// # Safety
/// `out` must be valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn wml_space_dyadic(depth: usize, out: *mut *mut WmlSpace) -> WmlStatus {
    guard(|| store(out, WmlSpace(FilteredSpace::dyadic(depth, None)?)))
}

/// Space from a JSON tree `{"mass": x, "children": [...]}`.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn wml_space_from_json(json: *const c_char, out: *mut *mut WmlSpace) -> WmlStatus {
    guard(|| {
        if json.is_null() {
            return Err(Fail::Null("json"));
        }
        let text = CStr::from_ptr(json).to_str().map_err(|e| Fail::Arg(format!("json is not UTF-8: {e}")))?;
        let spec = TreeSpec::from_json(text)?;
        store(out, WmlSpace(FilteredSpace::from_tree(&spec)?))
    })
}

/// # Safety
/// `space` must be a live handle and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn wml_space_num_leaves(space: *const WmlSpace, out: *mut usize) -> WmlStatus {
    guard(|| {
        let s = borrow(space, "space")?;
        *out.as_mut().ok_or(Fail::Null("out"))? = s.0.num_leaves();
        Ok(())
    })
}

/// # Safety
/// `space` must come from a `wml_space_*` constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn wml_space_free(space: *mut WmlSpace) {
    if !space.is_null() {
        drop(Box::from_raw(space));
    }
}

/// Weight from `leaves` row-major `dim × dim` blocks stored back to back.
///
/// # Safety
/// `data` must point to `leaves * dim * dim` doubles and `out` be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn wml_weight_new(
    dim: usize,
    leaves: usize,
    data: *const f64,
    out: *mut *mut WmlWeight,
) -> WmlStatus {
    guard(|| {
        if dim == 0 || leaves == 0 {
            return Err(Fail::Arg("dimension and leaf count must be positive".into()));
        }
        let block = dim.checked_mul(dim).ok_or_else(|| Fail::Arg("dimension overflows".into()))?;
        let total = block.checked_mul(leaves).ok_or_else(|| Fail::Arg("weight size overflows".into()))?;
        let values = slice(data, total, "data")?;
        let mats = values.chunks_exact(block).map(|c| Mat::from_row_major(dim, c)).collect();
        store(out, WmlWeight(MatrixWeight::new(mats)?))
    })
}

/// # Safety
/// `weight` must come from `wml_weight_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn wml_weight_free(weight: *mut WmlWeight) {
    if !weight.is_null() {
        drop(Box::from_raw(weight));
    }
}

/// Function from `leaves` vectors of length `dim` stored back to back.
///
/// # Safety
/// `data` must point to `leaves * dim` doubles and `out` be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn wml_function_new(
    dim: usize,
    leaves: usize,
    data: *const f64,
    out: *mut *mut WmlFunction,
) -> WmlStatus {
    guard(|| {
        if dim == 0 || leaves == 0 {
            return Err(Fail::Arg("dimension and leaf count must be positive".into()));
        }
        let total = dim.checked_mul(leaves).ok_or_else(|| Fail::Arg("function size overflows".into()))?;
        let values = slice(data, total, "data")?;
        store(out, WmlFunction(LeafFunction::new(dim, values.to_vec())?))
    })
}

/// # Safety
/// `f` must come from `wml_function_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn wml_function_free(f: *mut WmlFunction) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// `[W]_{A_p}` through fitted reducing matrices; `tol <= 0` selects the default fit tolerance.
///
/// # Safety
/// Handles must be live and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn wml_ap_characteristic(
    space: *const WmlSpace,
    weight: *const WmlWeight,
    p: f64,
    tol: f64,
    out: *mut f64,
) -> WmlStatus {
    guard(|| {
        let (s, w) = (borrow(space, "space")?, borrow(weight, "weight")?);
        check_p(p)?;
        let opts = if tol > 0.0 { ReducerOptions::with_tol(tol) } else { ReducerOptions::default() };
        let pair = ReducingPair::build(&s.0, &w.0, p, &opts)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = ap_characteristic(&pair);
        Ok(())
    })
}

/// Unweighted square function, one value per leaf.
///
/// # Safety
/// Handles must be live and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn wml_square_function(
    space: *const WmlSpace,
    f: *const WmlFunction,
    out: *mut f64,
    len: usize,
) -> WmlStatus {
    guard(|| {
        let (s, f) = (borrow(space, "space")?, borrow(f, "function")?);
        let mart = martingale_of(&s.0, &f.0)?;
        write_leaves(square_fn(&s.0, &mart).values(), out, len)
    })
}

/// `S_W f` at exponent `p`, one value per leaf.
///
/// # Safety
/// Handles must be live and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn wml_weighted_square_function(
    space: *const WmlSpace,
    weight: *const WmlWeight,
    p: f64,
    f: *const WmlFunction,
    out: *mut f64,
    len: usize,
) -> WmlStatus {
    guard(|| {
        let (s, w, f) = (borrow(space, "space")?, borrow(weight, "weight")?, borrow(f, "function")?);
        check_p(p)?;
        write_leaves(weighted_square_fn(&s.0, &w.0, p, &f.0)?.values(), out, len)
    })
}

/// Pointwise `S_W f ≤ K · T_{W,2} f` over the principal sets of `f` at
/// threshold `cgamma` (`cgamma <= 0` selects the default).
///
/// # Safety
/// Handles must be live and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn wml_domination_check(
    space: *const WmlSpace,
    weight: *const WmlWeight,
    p: f64,
    f: *const WmlFunction,
    cgamma: f64,
    out: *mut WmlDominationReport,
) -> WmlStatus {
    guard(|| {
        let (s, w, f) = (borrow(space, "space")?, borrow(weight, "weight")?, borrow(f, "function")?);
        check_p(p)?;
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        let c = if cgamma > 0.0 { cgamma } else { default_cgamma() };
        let pair = ReducingPair::build(&s.0, &w.0, p, &ReducerOptions::default())?;
        let r = sparse_domination_check(&s.0, &pair, &f.0, c, Default::default())?;
        *out = WmlDominationReport {
            max_ratio: r.max_ratio,
            bound: r.bound,
            unbounded_leaves: r.unbounded_leaves,
            pass: r.pass,
        };
        Ok(())
    })
}
