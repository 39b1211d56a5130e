//! Contract tests against the actual binary: exit codes, refusal semantics,
//! output formats, and rerun determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use defectvit_core::config::RunConfig;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_defectvit")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn write_cfg(root: &Path, edit: impl FnOnce(&mut RunConfig)) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.seed = 404;
    cfg.data.path = root.join("data");
    cfg.output_dir = root.join("run");
    cfg.optimizer.epochs = 1;
    cfg.data.generator.train = 8;
    cfg.data.generator.val = 2;
    cfg.data.generator.test = 2;
    edit(&mut cfg);
    let path = root.join("cfg.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn generate_refuses_then_forces_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), |_| {});
    let cfg_s = cfg.to_str().unwrap();

    let first = run(&["generate", "--config", cfg_s]);
    assert!(first.status.success(), "{}", stderr(&first));
    let ann_path = dir.path().join("data/train/annotations.json");
    let before = std::fs::read(&ann_path).unwrap();

    // refusal without --force, exit code 2
    let refused = run(&["generate", "--config", cfg_s]);
    assert_eq!(refused.status.code(), Some(2), "{}", stderr(&refused));
    assert!(stderr(&refused).contains("--force"));

    // --force overwrites; same seed gives byte-identical annotations
    let forced = run(&["generate", "--config", cfg_s, "--force"]);
    assert!(forced.status.success(), "{}", stderr(&forced));
    let after = std::fs::read(&ann_path).unwrap();
    assert_eq!(before, after);
}

#[test]
fn usage_errors_exit_2() {
    let unknown = run(&["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(2));
    let missing = run(&["train"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn missing_config_is_runtime_error() {
    let out = run(&["train", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("cfg.toml"));
}

#[test]
fn train_eval_predict_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), |c| {
        c.optimizer.epochs = 1;
    });
    let cfg_s = cfg.to_str().unwrap();

    let gen = run(&["generate", "--config", cfg_s]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    let tr = run(&["train", "--config", cfg_s]);
    assert!(tr.status.success(), "{}", stderr(&tr));
    let ckpt = dir.path().join("run/final.ckpt");
    assert!(ckpt.exists());
    assert!(dir.path().join("run/history.csv").exists());
    assert!(dir.path().join("run/loss.svg").exists());
    let ckpt_s = ckpt.to_str().unwrap();

    // eval on an existing split writes report files that agree
    let ev = run(&["eval", "--checkpoint", ckpt_s, "--split", "test"]);
    assert!(ev.status.success(), "{}", stderr(&ev));
    let report_json = dir.path().join("run/eval_test/report.json");
    let report_csv = dir.path().join("run/eval_test/report.csv");
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_json).unwrap()).unwrap();
    let csv = std::fs::read_to_string(&report_csv).unwrap();
    // CSV values match the JSON values exactly after parsing
    for (key, line_prefix) in [
        ("accuracy", "accuracy,"),
        ("mae", "mae,"),
        ("mean_iou", "mean_iou,"),
    ] {
        let csv_value = csv
            .lines()
            .find(|l| l.starts_with(line_prefix))
            .unwrap()
            .split(',')
            .nth(1)
            .unwrap()
            .to_string();
        match &parsed[key] {
            serde_json::Value::Null => assert_eq!(csv_value, "undefined"),
            v => assert_eq!(csv_value.parse::<f64>().unwrap(), v.as_f64().unwrap()),
        }
    }

    // an unknown split name is a runtime error naming the valid splits
    let bad = run(&["eval", "--checkpoint", ckpt_s, "--split", "val2"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("train, val or test"), "{}", stderr(&bad));
}

#[test]
fn eval_missing_split_lists_available() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), |c| {
        c.data.generator.test = 0; // no test split on disk
    });
    let cfg_s = cfg.to_str().unwrap();
    assert!(run(&["generate", "--config", cfg_s]).status.success());
    assert!(run(&["train", "--config", cfg_s]).status.success());
    let ckpt = dir.path().join("run/final.ckpt");
    let out = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--split", "test"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("train") && err.contains("val"), "{err}");
}

#[test]
fn eval_empty_split_reports_undefined_with_exit_0() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), |c| {
        c.data.generator.test = 0;
    });
    let cfg_s = cfg.to_str().unwrap();
    assert!(run(&["generate", "--config", cfg_s]).status.success());
    assert!(run(&["train", "--config", cfg_s]).status.success());
    // an explicitly empty split on disk
    let test_dir = dir.path().join("data/test");
    std::fs::create_dir_all(test_dir.join("images")).unwrap();
    let classes: Vec<String> = RunConfig::default().data.generator.classes;
    std::fs::write(
        test_dir.join("annotations.json"),
        serde_json::json!({ "classes": classes, "samples": [] }).to_string(),
    )
    .unwrap();
    let ckpt = dir.path().join("run/final.ckpt");
    let out = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--split", "test"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run/eval_test/report.json")).unwrap(),
    )
    .unwrap();
    assert!(report["accuracy"].is_null());
    assert!(report["mae"].is_null());
}

#[test]
fn predict_writes_schema_shaped_json_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), |_| {});
    let cfg_s = cfg.to_str().unwrap();
    assert!(run(&["generate", "--config", cfg_s]).status.success());
    assert!(run(&["train", "--config", cfg_s]).status.success());
    let ckpt = dir.path().join("run/final.ckpt");
    let image = dir.path().join("data/train/images/train_00000.png");
    let out_dir = dir.path().join("pred");

    let p1 = run(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        image.to_str().unwrap(),
    ]);
    assert!(p1.status.success(), "{}", stderr(&p1));
    let json_path = out_dir.join("predictions.json");
    let first = std::fs::read(&json_path).unwrap();

    // every box parses against the annotation schema's box shape
    #[derive(serde::Deserialize)]
    struct SchemaBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        class: usize,
    }
    let boxes: Vec<SchemaBox> = serde_json::from_slice(&first).unwrap();
    for b in &boxes {
        assert!(b.x1 < b.x2 && b.y1 < b.y2);
        assert!(b.class < 3);
    }
    assert!(out_dir.join("overlay.svg").exists());

    // rerun: byte-identical predictions
    let p2 = run(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        image.to_str().unwrap(),
    ]);
    assert!(p2.status.success());
    assert_eq!(first, std::fs::read(&json_path).unwrap());

    // unreadable image: runtime error naming the path
    let missing = dir.path().join("nope.png");
    let p3 = run(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        missing.to_str().unwrap(),
    ]);
    assert_eq!(p3.status.code(), Some(1));
    assert!(stderr(&p3).contains("nope.png"));
}
