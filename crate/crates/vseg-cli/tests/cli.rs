//! End-to-end exercises of the `vseg` binary: the full pipeline from
//! synthetic data to fused predictions out of one seed, plus the failure
//! modes that must exit nonzero without leaving partial output behind.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vseg(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vseg"))
        .args(args)
        .current_dir(work)
        .output()
        .expect("binary should spawn")
}

/// Runs a subcommand that must succeed and hands back its stderr log.
fn run_ok(work: &Path, args: &[&str]) -> String {
    let out = vseg(work, args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(
        out.status.success(),
        "vseg {args:?} failed with {:?}:\n{stderr}",
        out.status.code()
    );
    stderr
}

/// Runs a subcommand that must fail with the given exit code.
fn run_fail(work: &Path, args: &[&str], code: i32) -> String {
    let out = vseg(work, args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(
        out.status.code(),
        Some(code),
        "vseg {args:?} should exit {code}:\n{stderr}"
    );
    stderr
}

fn read_json(path: &Path) -> Value {
    let bytes = fs::read(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    serde_json::from_slice(&bytes)
        .unwrap_or_else(|e| panic!("{} is not valid JSON: {e}", path.display()))
}

/// Manifests share one schema; spot-check the fields every run must fill.
fn assert_manifest(path: &Path, command: &str) -> Value {
    let m = read_json(path);
    assert_eq!(m["command"], command, "{}", path.display());
    assert!(m["version"].as_str().is_some_and(|v| !v.is_empty()));
    assert!(m["seed"].as_u64().is_some());
    assert!(m["threads"].as_u64().is_some_and(|t| t >= 1));
    assert!(m["config"].is_object());
    assert!(m["outputs"].as_array().is_some_and(|o| !o.is_empty()));
    assert!(m["duration_seconds"].as_f64().is_some_and(|d| d >= 0.0));
    m
}

#[test]
fn full_pipeline_runs_from_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();

    // Synthesize a small dataset.
    run_ok(
        work,
        &[
            "phantom",
            "--out-dir",
            "ds",
            "--subjects",
            "5",
            "--grid",
            "16",
            "--seed",
            "0",
        ],
    );
    for i in 0..5 {
        assert!(work.join(format!("ds/s00{i}.vsg")).is_file());
        assert!(work.join(format!("ds/s00{i}-labels.vsg")).is_file());
    }
    let index = read_json(&work.join("ds/dataset.json"));
    assert_eq!(index["subjects"].as_array().unwrap().len(), 5);
    assert_manifest(&work.join("ds/phantom-manifest.json"), "phantom");

    // Fingerprint it.
    run_ok(
        work,
        &["fingerprint", "--dataset", "ds/dataset.json", "--out", "fp.json"],
    );
    let fp = read_json(&work.join("fp.json"));
    assert_eq!(fp["median_shape"], serde_json::json!([16, 16, 16]));
    assert_eq!(fp["channels"], 4);
    assert_eq!(fp["class_count"], 4);
    assert_manifest(&work.join("fingerprint-manifest.json"), "fingerprint");

    // Derive a plan under a tight but viable budget.
    run_ok(
        work,
        &[
            "plan",
            "--fingerprint",
            "fp.json",
            "--out",
            "plan.json",
            "--budget-voxels",
            "131072",
        ],
    );
    let plan = read_json(&work.join("plan.json"));
    assert_eq!(plan["patch_size"], serde_json::json!([16, 16, 16]));
    assert_eq!(plan["in_channels"], 4);
    assert_eq!(plan["class_count"], 4);
    assert_manifest(&work.join("plan-manifest.json"), "plan");

    // Train a short fold.
    run_ok(
        work,
        &[
            "train",
            "--dataset",
            "ds/dataset.json",
            "--plan",
            "plan.json",
            "--out-dir",
            "model",
            "--folds",
            "2",
            "--fold",
            "0",
            "--epochs",
            "1",
            "--steps-per-epoch",
            "3",
            "--batch-size",
            "2",
            "--seed",
            "0",
        ],
    );
    assert!(work.join("model/fold0.vsgw").is_file());
    let log = read_json(&work.join("model/fold0-log.json"));
    assert_eq!(log["fold_index"], 0);
    assert_eq!(log["steps"], 3);
    let epochs = log["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 1);
    assert!(epochs[0]["total"].as_f64().unwrap().is_finite());
    let train_manifest = assert_manifest(&work.join("model/train-manifest.json"), "train");
    assert_eq!(train_manifest["config"]["batch_size"], 2);
    assert_eq!(train_manifest["config"]["momentum"], 0.99);

    // Predict every subject with two worker threads.
    run_ok(
        work,
        &[
            "predict",
            "--plan",
            "plan.json",
            "--weights",
            "model/fold0.vsgw",
            "--out-dir",
            "preds",
            "--threads",
            "2",
            "ds/s000.vsg",
            "ds/s001.vsg",
            "ds/s002.vsg",
            "ds/s003.vsg",
            "ds/s004.vsg",
        ],
    );
    for i in 0..5 {
        assert!(work.join(format!("preds/s00{i}-pred.vsg")).is_file());
    }
    let predict_manifest = assert_manifest(&work.join("preds/predict-manifest.json"), "predict");
    assert_eq!(predict_manifest["threads"], 2);
    assert_eq!(predict_manifest["outputs"].as_array().unwrap().len(), 5);

    // Score the predictions against the phantom labels.
    run_ok(
        work,
        &[
            "evaluate",
            "--dataset",
            "ds/dataset.json",
            "--pred-dir",
            "preds",
            "--out",
            "eval.json",
        ],
    );
    let eval = read_json(&work.join("eval.json"));
    assert_eq!(eval["subject_count"], 5);
    assert_eq!(eval["hd_percentile"], 95.0);
    assert_eq!(eval["subjects"].as_array().unwrap().len(), 5);
    let mean_dice = eval["mean_dice"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean_dice), "mean dice {mean_dice}");
    assert_manifest(&work.join("evaluate-manifest.json"), "evaluate");

    // Fuse two models that happen to agree everywhere: the fused map must
    // reproduce their common prediction bit for bit.
    let spec = serde_json::json!({
        "strategy": "mode",
        "weights": { "a": 2, "b": 1 },
        "subjects": (0..5).map(|i| serde_json::json!({
            "id": format!("s00{i}"),
            "predictions": {
                "a": format!("preds/s00{i}-pred.vsg"),
                "b": format!("preds/s00{i}-pred.vsg"),
            },
        })).collect::<Vec<_>>(),
    });
    fs::write(work.join("ensemble.json"), spec.to_string()).unwrap();
    run_ok(
        work,
        &["ensemble", "--spec", "ensemble.json", "--out-dir", "fused"],
    );
    for i in 0..5 {
        let fused = fs::read(work.join(format!("fused/s00{i}-fused.vsg"))).unwrap();
        let pred = fs::read(work.join(format!("preds/s00{i}-pred.vsg"))).unwrap();
        assert_eq!(fused, pred, "unanimous fusion must copy the prediction");
    }
    let decisions = read_json(&work.join("fused/decisions.json"));
    let records = decisions.as_array().unwrap();
    assert_eq!(records.len(), 5);
    assert!(records.iter().all(|r| r["strategy"] == "mode"));
    assert!(records.iter().all(|r| r.get("threshold").is_none()));
    assert_manifest(&work.join("fused/ensemble-manifest.json"), "ensemble");

    // Threshold fusion on the same inputs records the rule's decision.
    let spec = serde_json::json!({
        "strategy": "threshold",
        "threshold": {
            "tc_volume_max": 60.0,
            "et_volume_min": 60.0,
            "select_model": "a",
            "fallback_model": "b",
        },
        "subjects": (0..5).map(|i| serde_json::json!({
            "id": format!("s00{i}"),
            "predictions": {
                "a": format!("preds/s00{i}-pred.vsg"),
                "b": format!("preds/s00{i}-pred.vsg"),
            },
        })).collect::<Vec<_>>(),
    });
    fs::write(work.join("threshold.json"), spec.to_string()).unwrap();
    run_ok(
        work,
        &["ensemble", "--spec", "threshold.json", "--out-dir", "picked"],
    );
    let decisions = read_json(&work.join("picked/decisions.json"));
    for record in decisions.as_array().unwrap() {
        let chosen = record["threshold"]["chosen_model"].as_str().unwrap();
        assert!(chosen == "a" || chosen == "b");
        assert!(record["threshold"]["tc_volume"].as_f64().unwrap() >= 0.0);
    }

    // The gradient check passes at its stock tolerance.
    let stderr = run_ok(
        work,
        &["gradcheck", "--tolerance", "1e-4", "--samples", "2", "--out", "gc.json"],
    );
    assert!(stderr.contains("max relative error"), "log was: {stderr}");
    let gc = read_json(&work.join("gc.json"));
    assert_eq!(gc["passed"], true);
    assert!(gc["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert_manifest(&work.join("gradcheck-manifest.json"), "gradcheck");
}

#[test]
fn unknown_flags_fail_before_anything_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    run_fail(
        work,
        &["phantom", "--out-dir", "ds", "--subjects", "2", "--bogus"],
        1,
    );
    assert_eq!(
        fs::read_dir(work).unwrap().count(),
        0,
        "a rejected invocation must not touch the filesystem"
    );
}

#[test]
fn invalid_hyperparameters_leave_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    run_ok(
        work,
        &[
            "phantom",
            "--out-dir",
            "ds",
            "--subjects",
            "2",
            "--grid",
            "16",
        ],
    );
    run_ok(
        work,
        &["fingerprint", "--dataset", "ds/dataset.json", "--out", "fp.json"],
    );
    run_ok(
        work,
        &[
            "plan",
            "--fingerprint",
            "fp.json",
            "--out",
            "plan.json",
            "--budget-voxels",
            "131072",
        ],
    );
    let stderr = run_fail(
        work,
        &[
            "train",
            "--dataset",
            "ds/dataset.json",
            "--plan",
            "plan.json",
            "--out-dir",
            "model",
            "--folds",
            "2",
            "--momentum",
            "1.5",
        ],
        1,
    );
    assert!(stderr.contains("momentum"), "stderr was: {stderr}");
    assert!(
        !work.join("model").exists(),
        "a rejected run must not create its output directory"
    );
}

#[test]
fn failing_gradient_tolerance_exits_nonzero_with_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    let stderr = run_fail(
        work,
        &["gradcheck", "--tolerance", "1e-12", "--samples", "1", "--out", "gc.json"],
        1,
    );
    assert!(stderr.contains("exceeds tolerance"), "stderr was: {stderr}");
    let gc = read_json(&work.join("gc.json"));
    assert_eq!(gc["passed"], false, "the report must still be written");
}

#[test]
fn missing_input_files_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    let stderr = run_fail(
        work,
        &["fingerprint", "--dataset", "nowhere/dataset.json"],
        1,
    );
    assert!(stderr.contains("nowhere"), "stderr was: {stderr}");
}
