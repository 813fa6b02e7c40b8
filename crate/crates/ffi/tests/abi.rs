use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use hardy_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(hl_last_error()) }.to_string_lossy().into_owned()
}

fn grid(dim: usize, n: usize) -> *mut HlGrid {
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { hl_grid_new(dim, 2.0, n, 0.1, &mut g) }, HlStatus::Ok);
    g
}

fn gaussian(g: *const HlGrid, width: f64) -> *mut HlField {
    let fam = CString::new(format!(r#"{{"name": "gaussian_bump", "params": {{"width": {width}}}}}"#)).unwrap();
    let mut f = ptr::null_mut();
    assert_eq!(unsafe { hl_field_sample(g, fam.as_ptr(), 1, &mut f) }, HlStatus::Ok, "{}", last_error());
    f
}

#[test]
fn invalid_grid_reports_config_status_and_message() {
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { hl_grid_new(2, 2.0, 48, 0.1, &mut g) }, HlStatus::Config);
    assert!(g.is_null());
    assert!(last_error().contains("power of two"), "{}", last_error());
    assert_eq!(unsafe { hl_grid_new(2, 2.0, 64, 0.1, ptr::null_mut()) }, HlStatus::NullArgument);
}

#[test]
fn field_values_roundtrip() {
    let g = grid(1, 64);
    let n = unsafe { hl_grid_len(g) };
    let re: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
    let im: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
    let mut f = ptr::null_mut();
    assert_eq!(unsafe { hl_field_from_values(g, 1, re.as_ptr(), im.as_ptr(), n, &mut f) }, HlStatus::Ok);
    let (mut r2, mut i2) = (vec![0.0; n], vec![0.0; n]);
    assert_eq!(unsafe { hl_field_values(f, r2.as_mut_ptr(), i2.as_mut_ptr(), n) }, HlStatus::Ok);
    assert_eq!((re, im), (r2, i2));
    assert_eq!(unsafe { hl_field_values(f, vec![0.0; 3].as_mut_ptr(), ptr::null_mut(), 3) }, HlStatus::Invalid);
    unsafe {
        hl_field_free(f);
        hl_grid_free(g);
    }
}

#[test]
fn hp_norm_matches_the_library() {
    let g = grid(2, 64);
    let f = gaussian(g, 0.3);
    let mut v = 0.0;
    assert_eq!(unsafe { hl_hp_norm(f, 1.0, &mut v) }, HlStatus::Ok);
    let spec = hardy_lab::grid::GridSpec::new(2, 2.0, 64, 0.1).unwrap();
    let lib = hardy_lab::grid::sample(&hardy_lab::grid::TestFamily::new("gaussian_bump", &[("width", 0.3)]), &spec, 1).unwrap();
    let want = hardy_lab::norms::hp_norm(&lib, 1.0, &hardy_lab::grid::Profile::Bump, &Default::default()).unwrap();
    assert_eq!(v, want);
    let mut hs = 0.0;
    assert_eq!(unsafe { hl_hardy_sobolev_norm(f, 1, 1.0, false, &mut hs) }, HlStatus::Ok);
    assert!(hs > 0.0);
    unsafe {
        hl_field_free(f);
        hl_grid_free(g);
    }
}

#[test]
fn operator_apply_and_adjoint_shapes() {
    let g = grid(2, 64);
    let f = gaussian(g, 0.3);
    let name = CString::new("gradient2d").unwrap();
    let mut op = ptr::null_mut();
    assert_eq!(unsafe { hl_operator_by_name(name.as_ptr(), ptr::null(), &mut op) }, HlStatus::Ok);
    let mut grad = ptr::null_mut();
    assert_eq!(unsafe { hl_operator_apply(op, f, &mut grad) }, HlStatus::Ok);
    assert_eq!(unsafe { hl_field_channels(grad) }, 2);
    let mut star = ptr::null_mut();
    assert_eq!(unsafe { hl_operator_adjoint(op, &mut star) }, HlStatus::Ok);
    let mut div = ptr::null_mut();
    assert_eq!(unsafe { hl_operator_apply(star, grad, &mut div) }, HlStatus::Ok);
    assert_eq!(unsafe { hl_field_channels(div) }, 1);
    // Shape mismatch: grad* expects two channels.
    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { hl_operator_apply(star, f, &mut bad) }, HlStatus::Invalid);
    assert!(bad.is_null());
    let unknown = CString::new("no_such_operator").unwrap();
    let mut none = ptr::null_mut();
    assert_ne!(unsafe { hl_operator_by_name(unknown.as_ptr(), ptr::null(), &mut none) }, HlStatus::Ok);
    unsafe {
        for h in [f, grad, div] {
            hl_field_free(h);
        }
        hl_operator_free(op);
        hl_operator_free(star);
        hl_grid_free(g);
    }
}

#[test]
fn bessel_potential_preserves_shape() {
    let g = grid(2, 64);
    let f = gaussian(g, 0.3);
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { hl_bessel_potential(f, 1, &mut b) }, HlStatus::Ok);
    assert_eq!(unsafe { hl_field_len(b) }, unsafe { hl_field_len(f) });
    unsafe {
        hl_field_free(f);
        hl_field_free(b);
        hl_grid_free(g);
    }
}

#[test]
fn experiment_returns_report_json() {
    let cfg = CString::new(
        r#"{"experiment": "sgn", "grid": {"dim": 2, "box_half_width": 4.0, "points_per_axis": 64},
            "exponents": {"p": 1.0}, "families": [{"name": "gaussian_bump", "params": {"width": 0.6}}], "dilations": [1, 2]}"#,
    )
    .unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { hl_run_experiment(cfg.as_ptr(), &mut out) }, HlStatus::Ok, "{}", last_error());
    let text = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_owned();
    unsafe { hl_string_free(out) };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    assert_eq!(v["environment"]["header"]["p_star"], 2.0);

    let bad = CString::new(r#"{"experiment": "sgn"}"#).unwrap();
    assert_eq!(unsafe { hl_run_experiment(bad.as_ptr(), &mut out) }, HlStatus::Config);
    assert!(out.is_null());
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = root.join("include/hardy_ffi.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["hl_grid_new", "hl_field_sample", "hl_run_experiment", "hl_last_error", "HL_STATUS_GATE"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "hardy_ffi.h"
int main(void) {
    HlGrid *g = NULL;
    HlField *f = NULL;
    double v = 0.0;
    if (hl_grid_new(2, 2.0, 64, 0.1, &g) != HL_STATUS_OK) return 1;
    if (hl_field_sample(g, "{\"name\": \"gaussian_bump\", \"params\": {\"width\": 0.3}}", 1, &f) != HL_STATUS_OK) return 2;
    if (hl_hp_norm(f, 1.0, &v) != HL_STATUS_OK || !(v > 0.0)) return 3;
    if (hl_grid_new(2, 2.0, 48, 0.1, &g) != HL_STATUS_CONFIG || hl_last_error()[0] == 0) return 4;
    hl_field_free(f);
    printf("%.17g\n", v);
    return 0;
}
"#,
    )
    .unwrap();
    let lib = target_dir().join("libhardy_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("a C compiler is on PATH");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "smoke exited with {:?}", out.status.code());
    let v: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!(v > 0.0);
}
