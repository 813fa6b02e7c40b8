use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hardy-lab"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/configs").join(name)
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = bin().args(args).output().expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn theorem_a_config_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("thmA_grad2d.json");
    let (code, stdout, stderr) = run(&["divcurl", "--config", cfg.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap(), "--resolution-override", "256"]);
    assert_eq!(code, 0, "{stdout}{stderr}");
    let csv = fs::read_to_string(dir.path().join("thmA_grad2d.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 12);
    assert!(csv.starts_with("family,lambda,lhs,rhs,ratio,case,"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("thmA_grad2d.json")).unwrap()).unwrap();
    assert_eq!(json["environment"]["grid"]["points_per_axis"], 256);
    assert!(!dir.path().join("thmA_grad2d.partial").exists());
}

#[test]
fn reruns_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("sgn_p1.json");
    let args = ["run", "--config", cfg.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap(), "--resolution-override", "128"];
    assert_eq!(run(&args).0, 0);
    let first = (fs::read(dir.path().join("sgn_p1.csv")).unwrap(), fs::read(dir.path().join("sgn_p1.json")).unwrap());
    assert_eq!(run(&args).0, 0);
    let second = (fs::read(dir.path().join("sgn_p1.csv")).unwrap(), fs::read(dir.path().join("sgn_p1.json")).unwrap());
    assert_eq!(first, second);
}

#[test]
fn inadmissible_exponents_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("thmA_grad2d.json");
    let (code, _, stderr) = run(&["divcurl", "--config", cfg.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap(), "--set", "exponents.q=2", "--set", "exponents.r=0.6666666666666666"]);
    assert_eq!(code, 3, "{stderr}");
    assert!(stderr.contains("1/r"), "{stderr}");
    assert!(!dir.path().join("thmA_grad2d.csv").exists());
}

#[test]
fn kernel_violation_exits_with_gate_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("thmA_grad2d.json");
    let (code, _, stderr) =
        run(&["divcurl", "--config", cfg.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap(), "--resolution-override", "128", "--set", "field.construction=gradient"]);
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn failed_gate_exits_with_gate_code_and_still_writes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("thmA_grad2d.json");
    // At 128 points the lambda = 8 bumps are narrower than a cell and the sweep drifts past the bound.
    let (code, stdout, _) = run(&["divcurl", "--config", cfg.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap(), "--resolution-override", "128"]);
    assert_eq!(code, 2, "{stdout}");
    assert!(stdout.contains("FAILED: dilation_variation"));
    assert!(dir.path().join("thmA_grad2d.csv").exists());
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("sgn_p1.json");
    let (code, _, stderr) = run(&["run", "--config", cfg.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap(), "--set", "bogus=1"]);
    assert_eq!(code, 3);
    assert!(stderr.contains("bogus"), "{stderr}");
}

#[test]
fn norm_subcommand_prints_and_writes_hp_norm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("hp_bump.json");
    let (code, stdout, stderr) = run(&["norm", "--config", cfg.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0, "{stderr}");
    let printed: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    let written: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("hp_bump.json")).unwrap()).unwrap();
    assert_eq!(printed, written);
    let v = printed["hp_norm"].as_f64().unwrap();
    assert!(v.is_finite() && v > 0.0);
}

#[test]
fn maximal_subcommand_writes_a_readable_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mx.json");
    fs::write(&cfg, r#"{"grid": {"dim": 1, "box_half_width": 2.0, "points_per_axis": 64}, "family": {"name": "gaussian_bump", "params": {"width": 0.2}}, "kind": "small"}"#).unwrap();
    let (code, _, stderr) = run(&["maximal", "--config", cfg.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0, "{stderr}");
    let f = hardy_lab::io::read_field(&dir.path().join("mx.field")).unwrap();
    assert_eq!(f.spec.points_per_axis, 64);
    assert!(f.values.iter().all(|v| v.re >= 0.0));
}

#[test]
fn report_merges_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("sgn_p1.json");
    assert_eq!(run(&["run", "--config", cfg.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap(), "--resolution-override", "128"]).0, 0);
    let input = dir.path().join("sgn_p1.json");
    let out = dir.path().join("merged");
    let (code, _, stderr) = run(&["report", input.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stderr}");
    assert!(out.join("report.csv").exists());
}

#[test]
fn main_with_matches_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("hp_bump.json");
    let code = hardy_lab::cli::main_with(["hardy-lab", "norm", "--config", cfg.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(hardy_lab::cli::main_with(["hardy-lab", "frobnicate"]), 3);
}
