use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "--set",
    "synth.duration=840",
    "--set",
    "hyper.max_outer_iters=2",
    "--set",
    "hyper.atoms_per_device=2",
    "--set",
    "hyper.lambda1=0.003",
    "--set",
    "cdl.atoms_per_device=2",
    "--set",
    "cdl.iters=2",
];

fn dtdl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtdl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = dtdl(dir, args);
    assert!(
        out.status.success(),
        "dtdl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn read_powers(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn synth_is_deterministic_and_mains_is_the_device_sum() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["synth", "--out", "a"]));
    ok(dir.path(), &with_small(&["synth", "--out", "b"]));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    let mut files = vec!["manifest.json".to_string(), "truth.json".into(), "mains.csv".into()];
    for d in manifest["devices"].as_array().unwrap() {
        files.push(d["path"].as_str().unwrap().to_string());
    }
    for f in &files {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
    let mains = read_powers(&dir.path().join("a/mains.csv"));
    assert_eq!(mains.len(), 840);
    let mut sum = vec![0.0; mains.len()];
    for f in &files[3..] {
        for (s, p) in sum.iter_mut().zip(read_powers(&dir.path().join("a").join(f))) {
            *s += p;
        }
    }
    for (m, s) in mains.iter().zip(&sum) {
        assert!((m - s).abs() <= 1e-9 * s.abs().max(1.0), "{m} vs {s}");
    }
}

#[test]
fn training_twice_gives_identical_model_files() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["synth", "--out", "house"]));
    ok(dir.path(), &with_small(&["train", "--data", "house", "--out", "r1"]));
    ok(dir.path(), &with_small(&["train", "--data", "house", "--out", "r2"]));
    for f in ["model.json", "training_log.csv"] {
        let a = fs::read(dir.path().join("r1").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, fs::read(dir.path().join("r2").join(f)).unwrap(), "{f} differs");
    }
    let log = fs::read_to_string(dir.path().join("r1/training_log.csv")).unwrap();
    assert_eq!(
        log.lines().next().unwrap(),
        "iter,J,J1,J2,J3,J4,smoothness_residual,dict_delta"
    );
    let model: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r1/model.json")).unwrap()).unwrap();
    assert_eq!(model["kind"], "dtdl");
    assert_eq!(model["lstm"]["gate_order"], serde_json::json!(["a", "i", "f", "o"]));
}

#[test]
fn disaggregate_and_eval_write_their_reports() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["synth", "--out", "house"]));
    ok(dir.path(), &with_small(&["train", "--data", "house", "--out", "run"]));
    ok(
        dir.path(),
        &["disaggregate", "--data", "house", "--model", "run/model.json", "--out", "dis"],
    );
    let csv = fs::read_to_string(dir.path().join("dis/report.csv")).unwrap();
    // 840 samples in windows of 14, three devices, one header line.
    assert_eq!(csv.lines().count(), 1 + 60 * 3);
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("dis/report.json")).unwrap()).unwrap();
    assert_eq!(report["windows"].as_array().unwrap().len(), 60);

    ok(dir.path(), &with_small(&["eval", "--data", "house", "--model", "run/model.json", "--out", "ev"]));
    let metrics: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ev/metrics.json")).unwrap()).unwrap();
    let methods: Vec<&str> = metrics["methods"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["method"].as_str().unwrap())
        .collect();
    assert_eq!(methods, ["dtdl", "cdl", "smp"]);
    for m in metrics["methods"].as_array().unwrap() {
        let acc = m["acc"].as_f64().unwrap();
        assert!(acc.is_finite() && acc <= 100.0);
    }
}

#[test]
fn metrics_echo_the_default_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out", "house", "--set", "synth.duration=840"]);
    ok(
        dir.path(),
        &["eval", "--data", "house", "--out", "ev", "--set", "hyper.max_outer_iters=1", "--set", "cdl.iters=1"],
    );
    let metrics: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ev/metrics.json")).unwrap()).unwrap();
    let h = &metrics["config"]["hyper"];
    assert_eq!(h["lambda1"], 0.1);
    assert_eq!(h["lambda2"], 0.4);
    assert_eq!(h["lambda3"], 1.2);
    assert_eq!(h["lambda4"], 0.6);
    assert_eq!(h["eta"], 0.01);
    assert_eq!(h["epsilon"], 0.05);
    assert_eq!(h["omega"], 14);
    assert_eq!(h["m"], 7);
    assert_eq!(h["atoms_per_device"], 20);
}

#[test]
fn missing_manifest_exits_2_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dtdl(dir.path(), &["train", "--data", "nowhere/manifest.json", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"hyper": {"lambda9": 1.0}}"#).unwrap();
    let out = dtdl(dir.path(), &["synth", "--config", "cfg.json", "--out", "h"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda9"));
    assert_eq!(dtdl(dir.path(), &["synth", "--set", "hyper.omega=0", "--out", "h"]).status.code(), Some(2));
    assert_eq!(dtdl(dir.path(), &["synth"]).status.code(), Some(2));
    assert!(!dir.path().join("h").exists());
}

#[test]
fn unwritable_output_fails() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("taken"), "").unwrap();
    let out = dtdl(dir.path(), &with_small(&["synth", "--out", "taken"]));
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn reference_config_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference_house.json");
    ok(dir.path(), &["synth", "--config", cfg.to_str().unwrap(), "--out", "h", "--set", "synth.duration=280"]);
}

#[test]
fn gradcheck_seed_one_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--seed", "1", "--out", "gc"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("all 50 gradient checks passed"));
    let checks: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("gc/gradcheck.json")).unwrap()).unwrap();
    assert!(checks.as_array().unwrap().iter().all(|c| c["passed"] == true));
}
