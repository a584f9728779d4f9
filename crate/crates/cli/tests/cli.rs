use std::path::Path;
use std::process::{Command, Output};

fn milkit(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_milkit"))
        .args(args)
        .env("MILKIT_OUT_DIR", out)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) {
    let cfg = r#"{
        "model": {"backbone": {"kind": "mlp", "input_dim": 16, "stage_dims": [8]},
                  "head": {"variant": "transformer", "num_classes": 6, "attention_dim": 8, "depth": 1, "num_heads": 2}},
        "data": {"manifest": "manifest.json"},
        "epochs": 2, "folds": 2, "lr": 0.003
    }"#;
    std::fs::write(dir.join("cfg.json"), cfg).unwrap();
}

#[test]
fn gradcheck_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = milkit(dir.path(), &["gradcheck", "--trials", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("cases passed"));
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = milkit(dir.path(), &["train", "--config", "missing.json"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error kind=io message="));
    assert!(err.contains("missing.json"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = milkit(dir.path(), &["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn report_has_header_and_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let report = |method: &str, qwk: f64| {
        serde_json::json!({
            "method": method,
            "folds": [],
            "mean": {"accuracy": 0.5, "auc": null, "qwk": qwk},
            "std": {"accuracy": 0.0, "auc": null, "qwk": 0.05},
            "auc_kind": "macro_one_vs_rest"
        })
        .to_string()
    };
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    std::fs::write(&a, report("Attention MIL", 0.95)).unwrap();
    std::fs::write(&b, report("Transformer MIL", 0.97)).unwrap();
    let o = milkit(dir.path(), &["report", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, ["method,accuracy,auc,qwk", "Attention MIL,0.500±0.000,-,0.950±0.050", "Transformer MIL,0.500±0.000,-,0.970±0.050"]);
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    let ok = |o: Output| assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    ok(milkit(d, &["gen-data", "--task", "grade", "--bags", "40", "--k", "6", "--seed", "1"]));
    write_config(d);
    ok(milkit(d, &["train", "--config", &p("cfg.json"), "--deterministic"]));
    let first = std::fs::read_to_string(d.join("report.json")).unwrap();
    ok(milkit(d, &["train", "--config", &p("cfg.json"), "--deterministic"]));
    assert_eq!(first, std::fs::read_to_string(d.join("report.json")).unwrap());

    ok(milkit(d, &["pseudo-label", "--config", &p("cfg.json"), "--checkpoints", &p("fold0.ckpt"), &p("fold1.ckpt")]));
    let labels = std::fs::read_to_string(d.join("pseudo_labels.jsonl")).unwrap();
    assert_eq!(labels.lines().count(), 40 * 6);
    ok(milkit(d, &["retrain", "--config", &p("cfg.json"), "--labels", &p("pseudo_labels.jsonl")]));
    ok(milkit(d, &["eval", "--checkpoints", &p("fold0.ckpt"), "--data", &p("manifest.json")]));
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["method"], "eval");
}

#[test]
fn corrupt_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.ckpt"), b"nonsense").unwrap();
    assert_eq!(milkit(d, &["gen-data", "--bags", "10", "--k", "4"]).status.code(), Some(0));
    let o = milkit(d, &["eval", "--checkpoints", d.join("bad.ckpt").to_str().unwrap(), "--data", d.join("manifest.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error kind=checkpoint"));
}
