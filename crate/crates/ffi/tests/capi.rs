use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use wml_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(wml_last_error_message()) }.to_string_lossy().into_owned()
}

fn dyadic(depth: usize) -> *mut WmlSpace {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { wml_space_dyadic(depth, &mut s) }, WmlStatus::Ok);
    s
}

fn weight(dim: usize, data: &[f64]) -> *mut WmlWeight {
    let mut w = ptr::null_mut();
    let st = unsafe { wml_weight_new(dim, data.len() / (dim * dim), data.as_ptr(), &mut w) };
    assert_eq!(st, WmlStatus::Ok, "{}", last_error());
    w
}

fn function(dim: usize, data: &[f64]) -> *mut WmlFunction {
    let mut f = ptr::null_mut();
    assert_eq!(unsafe { wml_function_new(dim, data.len() / dim, data.as_ptr(), &mut f) }, WmlStatus::Ok);
    f
}

#[test]
fn dyadic_space_and_json_space() {
    let s = dyadic(3);
    let mut n = 0usize;
    assert_eq!(unsafe { wml_space_num_leaves(s, &mut n) }, WmlStatus::Ok);
    assert_eq!(n, 8);
    unsafe { wml_space_free(s) };

    let json = CString::new(r#"{"mass":1,"children":[{"mass":0.25},{"mass":0.75,"children":[{"mass":0.5},{"mass":0.25}]}]}"#).unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { wml_space_from_json(json.as_ptr(), &mut t) }, WmlStatus::Ok);
    assert_eq!(unsafe { wml_space_num_leaves(t, &mut n) }, WmlStatus::Ok);
    assert_eq!(n, 3);
    assert!(last_error().is_empty());
    unsafe { wml_space_free(t) };
}

#[test]
fn errors_map_to_status_codes() {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { wml_space_from_json(ptr::null(), &mut s) }, WmlStatus::NullPointer);
    assert!(last_error().contains("json"));

    let bad = CString::new("{not json").unwrap();
    assert_eq!(unsafe { wml_space_from_json(bad.as_ptr(), &mut s) }, WmlStatus::Validation);
    assert!(!last_error().is_empty());

    let mut w = ptr::null_mut();
    let indefinite = [1.0, 2.0, 2.0, 1.0];
    assert_eq!(unsafe { wml_weight_new(2, 1, indefinite.as_ptr(), &mut w) }, WmlStatus::Validation);
    assert!(w.is_null());
    assert_eq!(unsafe { wml_weight_new(0, 1, indefinite.as_ptr(), &mut w) }, WmlStatus::InvalidArgument);
    assert_eq!(unsafe { wml_weight_new(2, 1, ptr::null(), &mut w) }, WmlStatus::NullPointer);

    let sp = dyadic(1);
    let wt = weight(1, &[1.0, 1.0]);
    let mut out = 0.0;
    assert_eq!(unsafe { wml_ap_characteristic(sp, wt, 1.0, 0.0, &mut out) }, WmlStatus::InvalidArgument);
    assert_eq!(unsafe { wml_ap_characteristic(ptr::null(), wt, 2.0, 0.0, &mut out) }, WmlStatus::NullPointer);
    let wrong = weight(1, &[1.0, 1.0, 1.0, 1.0]);
    assert_eq!(unsafe { wml_ap_characteristic(sp, wrong, 2.0, 0.0, &mut out) }, WmlStatus::Validation);
    unsafe {
        wml_weight_free(wrong);
        wml_weight_free(wt);
        wml_space_free(sp);
        // freeing null is a no-op
        wml_space_free(ptr::null_mut());
    }
}

#[test]
fn identity_weight_has_unit_characteristic() {
    let s = dyadic(3);
    let eye: Vec<f64> = (0..8).flat_map(|_| [1.0, 0.0, 0.0, 1.0]).collect();
    let w = weight(2, &eye);
    let mut ap = 0.0;
    assert_eq!(unsafe { wml_ap_characteristic(s, w, 3.0, 0.0, &mut ap) }, WmlStatus::Ok);
    assert!((ap - 1.0).abs() < 1e-2, "{ap}");
    unsafe {
        wml_weight_free(w);
        wml_space_free(s);
    }
}

#[test]
fn square_functions_by_hand() {
    let s = dyadic(1);
    let f = function(1, &[1.0, -1.0]);
    let mut out = [0.0; 2];
    assert_eq!(unsafe { wml_square_function(s, f, out.as_mut_ptr(), 2) }, WmlStatus::Ok);
    // mean zero, so d_1 f = f
    assert_eq!(out, [1.0, 1.0]);

    // w = (4, 1), p = 2: g = w^{-1/2} f = (1/2, -1), d_1 g = (3/4, -3/4), S_w f = w^{1/2}|d_1 g|
    let w = weight(1, &[4.0, 1.0]);
    assert_eq!(unsafe { wml_weighted_square_function(s, w, 2.0, f, out.as_mut_ptr(), 2) }, WmlStatus::Ok);
    assert!((out[0] - 1.5).abs() < 1e-14 && (out[1] - 0.75).abs() < 1e-14, "{out:?}");

    let mut short = [0.0; 1];
    assert_eq!(unsafe { wml_square_function(s, f, short.as_mut_ptr(), 1) }, WmlStatus::InvalidArgument);
    assert!(last_error().contains("buffer"));
    unsafe {
        wml_weight_free(w);
        wml_function_free(f);
        wml_space_free(s);
    }
}

#[test]
fn identity_weight_matches_unweighted() {
    let s = dyadic(4);
    let vals: Vec<f64> = (0..32).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
    let f = function(2, &vals);
    let eye: Vec<f64> = (0..16).flat_map(|_| [1.0, 0.0, 0.0, 1.0]).collect();
    let w = weight(2, &eye);
    let (mut a, mut b) = ([0.0; 16], [0.0; 16]);
    assert_eq!(unsafe { wml_square_function(s, f, a.as_mut_ptr(), 16) }, WmlStatus::Ok);
    assert_eq!(unsafe { wml_weighted_square_function(s, w, 1.7, f, b.as_mut_ptr(), 16) }, WmlStatus::Ok);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
    unsafe {
        wml_weight_free(w);
        wml_function_free(f);
        wml_space_free(s);
    }
}

#[test]
fn domination_check_reports_constant() {
    let s = dyadic(5);
    let mats: Vec<f64> = (0..32)
        .flat_map(|i| {
            let t = i as f64 / 5.0;
            [2.0 + t.sin(), 0.3 * t.cos(), 0.3 * t.cos(), 1.0 + 0.5 * t]
        })
        .collect();
    let w = weight(2, &mats);
    let vals: Vec<f64> = (0..64).map(|i| ((i * 13 % 17) as f64 - 8.0) / 4.0).collect();
    let f = function(2, &vals);
    let mut r = WmlDominationReport::default();
    assert_eq!(unsafe { wml_domination_check(s, w, 2.5, f, 0.0, &mut r) }, WmlStatus::Ok, "{}", last_error());
    let c = 8.0 * 0.5f64.exp();
    let k_it = c * c + 2.0 * c * c + 2.0;
    assert!((r.bound - (k_it + 2.0).sqrt()).abs() < 1e-9);
    assert!(r.pass && r.unbounded_leaves == 0 && r.max_ratio > 0.0 && r.max_ratio <= r.bound, "{r:?}");
    unsafe {
        wml_function_free(f);
        wml_weight_free(w);
        wml_space_free(s);
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"wml.h\"\nint main(void) { WmlSpace *s = 0; WmlStatus st = wml_space_dyadic(2, &s); wml_space_free(s); return st == WML_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    for (cc, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = Command::new(cc)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I", include])
            .arg(&src)
            .status()
            .unwrap_or_else(|e| panic!("{cc}: {e}"));
        assert!(status.success(), "{cc} rejected wml.h");
    }
}

#[test]
fn c_program_links_and_runs() {
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libwml_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <math.h>
#include <stdio.h>
#include "wml.h"
int main(void) {
    WmlSpace *s = NULL; WmlWeight *w = NULL; WmlFunction *f = NULL;
    const double wv[2] = {4.0, 1.0}, fv[2] = {1.0, -1.0};
    double out[2];
    if (wml_space_dyadic(1, &s) != WML_STATUS_OK) return 2;
    if (wml_weight_new(1, 2, wv, &w) != WML_STATUS_OK) return 3;
    if (wml_function_new(1, 2, fv, &f) != WML_STATUS_OK) return 4;
    if (wml_weighted_square_function(s, w, 2.0, f, out, 2) != WML_STATUS_OK) return 5;
    if (wml_weighted_square_function(s, w, 0.5, f, out, 2) != WML_STATUS_INVALID_ARGUMENT) return 6;
    printf("%s\n", wml_last_error_message());
    if (wml_weighted_square_function(s, w, 2.0, f, out, 2) != WML_STATUS_OK) return 7;
    wml_function_free(f); wml_weight_free(w); wml_space_free(s);
    return fabs(out[0] - 1.5) < 1e-14 && fabs(out[1] - 0.75) < 1e-14 ? 0 : 1;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let built = Command::new("cc")
        .arg("-I")
        .arg(include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(built.success());
    let run = Command::new(&exe).output().unwrap();
    assert_eq!(run.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&run.stdout).contains("exponent"));
}
