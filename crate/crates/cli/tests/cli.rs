//! End-to-end runs of the `abs` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use abs_core::dataset::EvalReport;
use abs_core::fixtures::{golden_eval_report, write_synthetic_dataset, GOLDEN_EVAL_REPORT};
use abs_core::pipeline::ImageResult;
use serde_json::Value;

fn abs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abs")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = abs(args);
    assert!(
        out.status.success(),
        "abs {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn reference_selftest_passes() {
    let stdout = ok(&["selftest"]);
    assert!(stdout.lines().all(|l| !l.starts_with("FAIL")), "{stdout}");
    assert!(stdout.contains("all ") && stdout.contains("checks passed"), "{stdout}");
}

#[test]
fn classify_prints_a_result() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path()).unwrap();
    let image = dir.path().join("striped/img_01.png");
    let stdout = ok(&["classify", s(&image), "--reference", "--seed", "3"]);
    let result: ImageResult = serde_json::from_str(&stdout).unwrap();
    assert_eq!(result.predicted_class, "striped");
    assert_eq!(result.crops.len(), 60);
    assert_eq!(result.config.seed, 3);

    let baseline: Value = serde_json::from_str(&ok(&["classify", s(&image), "--reference", "--baseline"])).unwrap();
    assert_eq!(baseline["mode"], "baseline");
    assert_eq!(baseline["scores"].as_array().unwrap().len(), 3);
}

#[test]
fn eval_reproduces_the_golden_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synthetic");
    write_synthetic_dataset(&data).unwrap();
    let out = dir.path().join("out");
    ok(&["eval", "--reference", "--seed", "42", "--dataset", s(&data), "--output", s(&out)]);

    let text = fs::read_to_string(out.join("report.json")).unwrap();
    let mut report: EvalReport = serde_json::from_str(&text).unwrap();
    assert!(report.wall_time_ms.is_some());
    report = report.without_timing();
    report.config.paths = Default::default();
    let golden: EvalReport = serde_json::from_str(GOLDEN_EVAL_REPORT).unwrap();
    assert_eq!(report, golden);

    let lines: Vec<ImageResult> = fs::read_to_string(out.join("results.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 12);
    assert!(lines.iter().all(|r| r.is_correct() == Some(true)));
    assert_eq!(lines[0].image_id, "banded/img_00.png");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path()).unwrap();
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"n_crops": 5, "k": 4, "seed": 9}"#).unwrap();
    let image = dir.path().join("banded/img_00.png");
    let stdout = ok(&["classify", s(&image), "--reference", "--config", s(&config), "--seed", "11"]);
    let result: ImageResult = serde_json::from_str(&stdout).unwrap();
    assert_eq!(result.crops.len(), 5);
    assert_eq!(result.config.k, 4);
    assert_eq!(result.config.seed, 11);
}

#[test]
fn invalid_configuration_fails() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path()).unwrap();
    let image = dir.path().join("banded/img_00.png");
    let out = abs(&["classify", s(&image), "--reference", "--alpha", "0.95"]);
    assert!(!out.status.success());
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"crops": 5}"#).unwrap();
    let out = abs(&["classify", s(&image), "--reference", "--config", s(&config)]);
    assert!(!out.status.success());
    let out = abs(&["classify", s(&image)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--models-dir"));
}

#[test]
fn overlay_writes_a_png() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path()).unwrap();
    let image = dir.path().join("checkered/img_02.png");
    let png = dir.path().join("overlay.png");
    ok(&["overlay", s(&image), "--reference", "--out", s(&png)]);
    let decoded = image::open(&png).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (48, 40));
}

#[test]
fn demo_backend_runs_through_onnx() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["demo", s(dir.path())]);
    let model = dir.path().join("model");
    let stdout = ok(&["selftest", "--backend", s(&model), "--inputs", "3"]);
    assert!(stdout.contains("PASS recorded probes"), "{stdout}");
    assert!(stdout.contains("PASS attention rows"), "{stdout}");

    let out = dir.path().join("out");
    let catalog = dir.path().join("catalog");
    let data = dir.path().join("synthetic");
    ok(&[
        "eval", "--models-dir", s(&model), "--catalog", s(&catalog), "--dataset", s(&data), "--output", s(&out),
        "--seed", "42", "--workers", "2",
    ]);
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let reference = golden_eval_report(1).unwrap();
    assert_eq!(report.correct, reference.correct);
    assert_eq!(report.evaluated, 12);
}
