use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn focus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_focus"))
        .args(args)
        .output()
        .expect("spawn focus")
}

fn ok(args: &[&str]) -> String {
    let out = focus(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "image_size": 16, "patch_size": 8, "embed_dim": 8, "depth": 1, "heads": 2,
        "carp_channels": 2, "tau": 1.0, "alpha": 0.1, "learning_rate": 1e-3,
        "batch_size": 4, "iterations": 3, "seed": 5, "use_class_token": false
    });
    let path = dir.join("tiny.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn help_lists_subcommands_and_defaults() {
    let top = ok(&["--help"]);
    for cmd in ["synth", "train", "maps", "baseline", "eval", "gradcheck", "report"] {
        assert!(top.contains(cmd), "missing {cmd}");
    }
    let synth = ok(&["synth", "--help"]);
    assert!(synth.contains("[default: 0.05]"), "{synth}");
}

#[test]
fn bad_flags_exit_two() {
    assert_eq!(focus(&["synth", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(focus(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = focus(&["train", "--data", s(&dir.path().join("missing")), "--out", s(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().filter(|l| l.starts_with("error:")).count(), 1, "{err}");

    let out = focus(&["baseline", "--method", "blur", "--data", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("blur"));
}

#[test]
fn synth_train_maps_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["synth", "--out", s(&data), "--count", "8", "--size", "16", "--seed", "3"]);
    assert!(data.join("index.json").exists());
    assert!(data.join("000007_mask.pgm").exists());

    let cfg = tiny_config(root);
    let ckpt = root.join("model.ckpt");
    let log = root.join("train.jsonl");
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--config", s(&cfg), "--log", s(&log)]);
    let lines: Vec<serde_json::Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["config"]["seed"], 5);
    assert_eq!(lines[3]["step"], 2);

    let maps = root.join("maps");
    ok(&["maps", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&maps)]);
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(maps.join("000000_real.json")).unwrap()).unwrap();
    assert_eq!(side["generator"], "focus");
    assert_eq!(side["grid_h"], 2);

    let fake_only = root.join("fake_only");
    ok(&["maps", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&fake_only), "--fake-only"]);
    assert_ne!(
        fs::read(fake_only.join("000000_real.pgm")).unwrap(),
        fs::read(maps.join("000000_real.pgm")).unwrap()
    );

    let gt = root.join("gt");
    ok(&["baseline", "--method", "gt", "--data", s(&data), "--out", s(&gt)]);
    let eval_cfg = serde_json::json!({
        "iterations": 2, "batch_size": 4, "learning_rate": 1e-3, "bce_weight": 0.1,
        "output_side": null, "train_fraction": 0.75, "seed": 1
    });
    let eval_cfg_path = root.join("eval.json");
    fs::write(&eval_cfg_path, eval_cfg.to_string()).unwrap();
    let rep_a = root.join("a.json");
    let rep_b = root.join("b.json");
    ok(&["eval", "--maps", s(&maps), "--data", s(&data), "--out", s(&rep_a), "--config", s(&eval_cfg_path)]);
    ok(&["eval", "--maps", s(&gt), "--data", s(&data), "--out", s(&rep_b), "--config", s(&eval_cfg_path)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&rep_a).unwrap()).unwrap();
    assert_eq!(report["supervision_source"], "focus");
    assert_eq!(report["test_samples"], 4);

    let merged = root.join("merged.json");
    let table = ok(&["report", s(&rep_a), s(&rep_b), "--out", s(&merged)]);
    assert!(table.contains("focus") && table.contains("gt"), "{table}");
    assert!(merged.exists());
}

#[test]
fn gradcheck_passes_on_tiny_config() {
    let out = ok(&["gradcheck", "--coords", "40"]);
    assert!(out.contains("PASS"), "{out}");
}
