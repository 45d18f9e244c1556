use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "n_positions=4",
    "k=2",
    "geometry.detector_pixels=[32,32]",
    "geometry.pixel_pitch=[0.0047,0.0047]",
    "train.epochs=2",
    r#"reconstruction.grid={"dims":[16,16,16],"voxel_size":0.001,"origin":[-0.008,-0.008,-0.008]}"#,
    r#"specimens=[{"name":"a","defect_centre":[0.002,0,0],"role":"train"},{"name":"b","defect_centre":[0,0.003,0],"role":"test"}]"#,
];

fn projsel(args: &[&str], out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_projsel"));
    cmd.args(args).arg("--out").arg(out);
    for o in SMALL {
        cmd.arg("--stage-override").arg(o);
    }
    cmd.output().unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.trim_end().lines().count(), 1, "{text}");
    serde_json::from_str(text.trim_end()).unwrap()
}

#[test]
fn simulate_writes_one_projection_per_position() {
    let dir = tempfile::tempdir().unwrap();
    let out = projsel(&["simulate"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["artifacts"], 8);
    let raws = std::fs::read_dir(dir.path().join("specimens/a/projections"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "raw"))
        .count();
    assert_eq!(raws, 4);
}

#[test]
fn missing_input_is_a_single_json_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = projsel(&["train"], dir.path());
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    let err = stderr_json(&out);
    assert_eq!(err["error"], "missing_stage");
    assert!(err["message"].as_str().unwrap().contains("label"));
}

#[test]
fn bad_override_and_usage_errors_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = projsel(&["simulate", "--stage-override", "bogus"], dir.path());
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["error"], "invalid_input");
    let out = Command::new(env!("CARGO_BIN_EXE_projsel")).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
}

#[test]
fn config_reflects_flags_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = projsel(&["config", "--seed", "7"], dir.path());
    assert!(out.status.success());
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["k"], 2);
    assert_eq!(cfg["output_dir"], dir.path().to_str().unwrap());

    let file = dir.path().join("run.json");
    std::fs::write(&file, &out.stdout).unwrap();
    let again = Command::new(env!("CARGO_BIN_EXE_projsel"))
        .args(["config", "--config"])
        .arg(&file)
        .args(["--stage-override", "train.eps=0.25"])
        .output()
        .unwrap();
    assert!(again.status.success());
    let cfg2: serde_json::Value = serde_json::from_slice(&again.stdout).unwrap();
    assert_eq!(cfg2["train"]["eps"], 0.25);
    assert_eq!(cfg2["seed"], 7);
}

#[test]
fn full_run_then_rerun_of_a_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = projsel(&["run"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("evaluate/metrics.csv")).unwrap();
    assert!(metrics.starts_with("specimen,method,rmse,ssim"));
    let out = projsel(&["evaluate"], dir.path());
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(dir.path().join("evaluate/metrics.csv")).unwrap(), metrics);
}
