use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use cbdom_ffi::*;

fn last_error() -> String {
    let p = cbdom_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn run_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CString::new(r#"{"command": "characteristics", "level": 4, "vectorDim": 2}"#).unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut res: *mut std::ffi::c_char = ptr::null_mut();
    let st = unsafe { cbdom_run_json(cfg.as_ptr(), out.as_ptr(), &mut res) };
    assert_eq!(st, CbdomStatus::Ok);
    let text = unsafe { CStr::from_ptr(res) }.to_str().unwrap().to_owned();
    unsafe { cbdom_string_free(res) };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["exitCode"], 0);
    assert!(dir.path().join("characteristics.json").exists());
}

#[test]
fn run_json_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut res: *mut std::ffi::c_char = ptr::null_mut();
    let bad = CString::new(r#"{"command": "characteristics", "dimension": 5}"#).unwrap();
    let st = unsafe { cbdom_run_json(bad.as_ptr(), out.as_ptr(), &mut res) };
    assert_eq!(st, CbdomStatus::InvalidConfig);
    assert!(res.is_null());
    assert!(last_error().contains("dimension"));

    let st = unsafe { cbdom_run_json(ptr::null(), out.as_ptr(), &mut res) };
    assert_eq!(st, CbdomStatus::NullPointer);
    assert!(last_error().contains("config_json"));

    let failing = CString::new(
        r#"{"command": "verify", "level": 4, "vectorDim": 2, "seed": 1,
            "operator": {"kind": "bigHaarShift", "complexity": 0, "seed": 1},
            "family": [{"level": 0, "index": [0]}], "constant": 1e-9}"#,
    )
    .unwrap();
    let st = unsafe { cbdom_run_json(failing.as_ptr(), out.as_ptr(), &mut res) };
    assert_eq!(st, CbdomStatus::CheckFailed);
    assert!(!res.is_null());
    unsafe { cbdom_string_free(res) };
}

#[test]
fn handles_compose() {
    unsafe {
        let mut lat = ptr::null_mut();
        assert_eq!(cbdom_lattice_new(1, 5, &mut lat), CbdomStatus::Ok);
        let mut n = 0usize;
        assert_eq!(cbdom_lattice_cells(lat, &mut n), CbdomStatus::Ok);
        assert_eq!(n, 32);

        let vals: Vec<f64> = (0..2 * n).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let mut f = ptr::null_mut();
        assert_eq!(cbdom_function_new(lat, 2, vals.as_ptr(), vals.len(), &mut f), CbdomStatus::Ok);

        let spec = CString::new(r#"{"kind": "martingaleTransform", "seed": 3}"#).unwrap();
        let mut op = ptr::null_mut();
        assert_eq!(cbdom_operator_from_json(lat, spec.as_ptr(), &mut op), CbdomStatus::Ok);
        let (mut tf, mut ttf) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(cbdom_operator_apply(op, f, 0, &mut tf), CbdomStatus::Ok);
        assert_eq!(cbdom_operator_apply(op, tf, 1, &mut ttf), CbdomStatus::Ok);

        let mut written = 0usize;
        let mut short = [0.0; 3];
        assert_eq!(
            cbdom_function_values(tf, short.as_mut_ptr(), short.len(), &mut written),
            CbdomStatus::InvalidArgument
        );
        assert_eq!(written, 2 * n);
        let mut a = vec![0.0; written];
        let mut b = vec![0.0; written];
        assert_eq!(cbdom_function_values(tf, a.as_mut_ptr(), a.len(), &mut written), CbdomStatus::Ok);
        assert_eq!(cbdom_function_values(ttf, b.as_mut_ptr(), b.len(), &mut written), CbdomStatus::Ok);
        // ⟨Tf, Tf⟩ = ⟨f, T*Tf⟩
        let lhs: f64 = a.iter().map(|x| x * x).sum();
        let rhs: f64 = vals.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()), "{lhs} {rhs}");

        let wspec = CString::new(r#"{"kind": "identity"}"#).unwrap();
        let mut w = ptr::null_mut();
        assert_eq!(cbdom_weight_from_json(lat, wspec.as_ptr(), 2, &mut w), CbdomStatus::Ok);
        let mut a2 = 0.0;
        assert_eq!(cbdom_weight_a2(w, ptr::null(), &mut a2), CbdomStatus::Ok);
        assert_eq!(a2, 1.0);
        assert_eq!(cbdom_weight_a2(w, w, &mut a2), CbdomStatus::Ok);
        assert_eq!(a2, 1.0);

        cbdom_weight_free(w);
        cbdom_function_free(ttf);
        cbdom_function_free(tf);
        cbdom_function_free(f);
        cbdom_operator_free(op);
        cbdom_lattice_free(lat);
        cbdom_lattice_free(ptr::null_mut());
    }
}

#[test]
fn argument_errors_map_to_codes() {
    unsafe {
        let mut lat = ptr::null_mut();
        assert_eq!(cbdom_lattice_new(3, 4, &mut lat), CbdomStatus::InvalidArgument);
        assert_eq!(cbdom_lattice_new(1, 4, ptr::null_mut()), CbdomStatus::NullPointer);
        assert_eq!(cbdom_lattice_new(1, 4, &mut lat), CbdomStatus::Ok);
        let bad = CString::new(r#"{"kind": "nope"}"#).unwrap();
        let mut w = ptr::null_mut();
        assert_eq!(cbdom_weight_from_json(lat, bad.as_ptr(), 1, &mut w), CbdomStatus::InvalidConfig);
        let vals = [1.0; 5];
        let mut f = ptr::null_mut();
        assert_eq!(cbdom_function_new(lat, 1, vals.as_ptr(), 5, &mut f), CbdomStatus::InvalidArgument);
        assert!(!last_error().is_empty());
        cbdom_lattice_free(lat);
    }
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/cbdom.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in [
        "cbdom_run_json",
        "cbdom_last_error",
        "cbdom_string_free",
        "cbdom_lattice_new",
        "cbdom_function_values",
        "cbdom_weight_a2",
        "cbdom_operator_apply",
        "CBDOM_STATUS_CHECK_FAILED",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    // Syntax-check with a C compiler when one is installed.
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c", header]).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
