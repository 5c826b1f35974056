//! C ABI over the `cbdom` library.
//!
//! Every entry point returns a [`CbdomStatus`]; on failure the message is
//! available from [`cbdom_last_error`] on the same thread. Objects are opaque
//! handles released by their `_free` function. Strings handed out by the
//! library are released with [`cbdom_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cbdom::cli::{run, ExperimentConfig};
use cbdom::dyadic::{DyadicLattice, GridFunction};
use cbdom::operators::{GridOperator, Operator, OperatorSpec};
use cbdom::weights::{a2_matrix, a2_two_weight, MatrixWeight, WeightSpec};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CbdomStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    InvalidArgument = 4,
    Numerical = 5,
    /// The run finished but one of its checks failed.
    CheckFailed = 6,
    Io = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

struct Failure(CbdomStatus, String);

fn fail<E: std::fmt::Display>(status: CbdomStatus) -> impl FnOnce(E) -> Failure {
    move |e| Failure(status, e.to_string())
}

/// Runs `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<CbdomStatus, Failure>) -> CbdomStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(status)) => status,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            CbdomStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(CbdomStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CbdomStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(CbdomStatus::NullPointer, format!("{name} is null")))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(CbdomStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("interior nuls removed").into_raw()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cbdom_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cbdom_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Runs an experiment config (JSON text) writing artifacts into `out_dir`.
/// `*result_json` receives `{"passed", "exitCode", "summary", "files"}`.
///
/// # Safety
/// Pointer arguments must be valid NUL-terminated strings; `result_json` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn cbdom_run_json(
    config_json: *const c_char,
    out_dir: *const c_char,
    result_json: *mut *mut c_char,
) -> CbdomStatus {
    guard(|| {
        let text = str_arg(config_json, "config_json")?;
        let dir = str_arg(out_dir, "out_dir")?;
        out_arg(result_json, "result_json")?;
        *result_json = ptr::null_mut();
        let cfg = ExperimentConfig::from_json(text, "config").map_err(fail(CbdomStatus::InvalidConfig))?;
        let outcome = run(&cfg, Path::new(dir)).map_err(|e| {
            let status = match e {
                cbdom::cli::RunError::Config(_) => CbdomStatus::InvalidConfig,
                cbdom::cli::RunError::Numerical { .. } => CbdomStatus::Numerical,
                cbdom::cli::RunError::Write { .. } => CbdomStatus::Io,
            };
            Failure(status, e.to_string())
        })?;
        let files: Vec<String> = outcome.files.iter().map(|f| f.display().to_string()).collect();
        let json = serde_json::json!({
            "passed": outcome.passed,
            "exitCode": outcome.exit_code(),
            "summary": outcome.summary,
            "files": files,
        });
        *result_json = into_c_string(json.to_string());
        if outcome.passed {
            Ok(CbdomStatus::Ok)
        } else {
            Err(Failure(CbdomStatus::CheckFailed, outcome.summary))
        }
    })
}

/// Opaque dyadic lattice.
pub struct CbdomLattice(DyadicLattice);

/// Opaque vector-valued grid function.
pub struct CbdomFunction(GridFunction);

/// Opaque matrix weight.
pub struct CbdomWeight(MatrixWeight);

/// Opaque linear operator on grid functions.
pub struct CbdomOperator(Operator);

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbdom_lattice_new(dim: u8, level: u8, out: *mut *mut CbdomLattice) -> CbdomStatus {
    guard(|| {
        out_arg(out, "out")?;
        let lat = DyadicLattice::new(dim, level).map_err(fail(CbdomStatus::InvalidArgument))?;
        *out = Box::into_raw(Box::new(CbdomLattice(lat)));
        Ok(CbdomStatus::Ok)
    })
}

/// Number of finest cells.
///
/// # Safety
/// `lattice` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cbdom_lattice_cells(lattice: *const CbdomLattice, out: *mut usize) -> CbdomStatus {
    guard(|| {
        let lat = ref_arg(lattice, "lattice")?;
        out_arg(out, "out")?;
        *out = lat.0.n_cells();
        Ok(CbdomStatus::Ok)
    })
}

/// # Safety
/// `lattice` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbdom_lattice_free(lattice: *mut CbdomLattice) {
    if !lattice.is_null() {
        drop(Box::from_raw(lattice));
    }
}

/// Grid function from `len = cells · d` cell-major values.
///
/// # Safety
/// `values` must point at `len` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn cbdom_function_new(
    lattice: *const CbdomLattice,
    d: usize,
    values: *const f64,
    len: usize,
    out: *mut *mut CbdomFunction,
) -> CbdomStatus {
    guard(|| {
        let lat = ref_arg(lattice, "lattice")?;
        ref_arg(values, "values")?;
        out_arg(out, "out")?;
        let v = std::slice::from_raw_parts(values, len).to_vec();
        let f = GridFunction::new(lat.0, d, v).map_err(fail(CbdomStatus::InvalidArgument))?;
        *out = Box::into_raw(Box::new(CbdomFunction(f)));
        Ok(CbdomStatus::Ok)
    })
}

/// Copies the values into `buf` (capacity `len`); `*written` gets the total
/// count, so a short buffer reports the size it needs.
///
/// # Safety
/// `buf` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cbdom_function_values(
    f: *const CbdomFunction,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> CbdomStatus {
    guard(|| {
        let f = ref_arg(f, "f")?;
        out_arg(written, "written")?;
        let vals = f.0.values();
        *written = vals.len();
        if len < vals.len() {
            return Err(Failure(
                CbdomStatus::InvalidArgument,
                format!("buffer holds {len} values, {} needed", vals.len()),
            ));
        }
        out_arg(buf, "buf")?;
        ptr::copy_nonoverlapping(vals.as_ptr(), buf, vals.len());
        Ok(CbdomStatus::Ok)
    })
}

/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbdom_function_free(f: *mut CbdomFunction) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Weight from a JSON weight spec (`{"kind": "scalarPower", "p": 0.5}` etc.).
///
/// # Safety
/// `spec_json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cbdom_weight_from_json(
    lattice: *const CbdomLattice,
    spec_json: *const c_char,
    d: usize,
    out: *mut *mut CbdomWeight,
) -> CbdomStatus {
    guard(|| {
        let lat = ref_arg(lattice, "lattice")?;
        let text = str_arg(spec_json, "spec_json")?;
        out_arg(out, "out")?;
        let spec: WeightSpec = serde_json::from_str(text).map_err(fail(CbdomStatus::InvalidConfig))?;
        let w = spec.build(lat.0, d, 0.0).map_err(fail(CbdomStatus::InvalidArgument))?;
        *out = Box::into_raw(Box::new(CbdomWeight(w)));
        Ok(CbdomStatus::Ok)
    })
}

/// `[W]_{A₂}`, or the two-weight characteristic `[W, V]` when `v` is non-null.
///
/// # Safety
/// `w` must be live, `v` null or live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cbdom_weight_a2(w: *const CbdomWeight, v: *const CbdomWeight, out: *mut f64) -> CbdomStatus {
    guard(|| {
        let w = ref_arg(w, "w")?;
        out_arg(out, "out")?;
        let rep = match v.as_ref() {
            Some(v) => a2_two_weight(&w.0, &v.0),
            None => a2_matrix(&w.0),
        }
        .map_err(fail(CbdomStatus::Numerical))?;
        *out = rep.value;
        Ok(CbdomStatus::Ok)
    })
}

/// # Safety
/// `w` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbdom_weight_free(w: *mut CbdomWeight) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// Operator from a JSON operator spec (`{"kind": "czHilbert"}` etc.).
///
/// # Safety
/// `spec_json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cbdom_operator_from_json(
    lattice: *const CbdomLattice,
    spec_json: *const c_char,
    out: *mut *mut CbdomOperator,
) -> CbdomStatus {
    guard(|| {
        let lat = ref_arg(lattice, "lattice")?;
        let text = str_arg(spec_json, "spec_json")?;
        out_arg(out, "out")?;
        let spec: OperatorSpec = serde_json::from_str(text).map_err(fail(CbdomStatus::InvalidConfig))?;
        let op = spec.build(lat.0).map_err(fail(CbdomStatus::InvalidArgument))?;
        *out = Box::into_raw(Box::new(CbdomOperator(op)));
        Ok(CbdomStatus::Ok)
    })
}

/// `*out = T f` (or `T* f` when `adjoint` is nonzero) as a new handle.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cbdom_operator_apply(
    op: *const CbdomOperator,
    f: *const CbdomFunction,
    adjoint: i32,
    out: *mut *mut CbdomFunction,
) -> CbdomStatus {
    guard(|| {
        let op = ref_arg(op, "op")?;
        let f = ref_arg(f, "f")?;
        out_arg(out, "out")?;
        let g = if adjoint != 0 { op.0.apply_adjoint(&f.0) } else { op.0.apply(&f.0) }
            .map_err(fail(CbdomStatus::InvalidArgument))?;
        *out = Box::into_raw(Box::new(CbdomFunction(g)));
        Ok(CbdomStatus::Ok)
    })
}

/// # Safety
/// `op` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cbdom_operator_free(op: *mut CbdomOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_a_status() {
        let st = guard(|| panic!("boom"));
        assert_eq!(st, CbdomStatus::Panic);
        let msg = unsafe { CStr::from_ptr(cbdom_last_error()) }.to_str().unwrap().to_owned();
        assert!(msg.contains("boom"));
    }

    #[test]
    fn errors_are_thread_local() {
        set_error("here");
        let other = std::thread::spawn(|| cbdom_last_error().is_null()).join().unwrap();
        assert!(other);
        assert!(!cbdom_last_error().is_null());
    }
}
