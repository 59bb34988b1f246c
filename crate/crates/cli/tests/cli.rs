use std::path::Path;
use std::process::{Command, Output};

fn alignlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alignlab")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {text}"))
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    let cfg = serde_json::json!({
        "steps": 3,
        "data": {"train_prompts": 16, "heldout_prompts": 4}
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn selftest_passes() {
    let out = alignlab(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(stdout_json(&out).is_object());
}

#[test]
fn help_and_version_exit_cleanly() {
    assert_eq!(alignlab(&["--help"]).status.code(), Some(0));
    assert_eq!(alignlab(&["--version"]).status.code(), Some(0));
}

#[test]
fn configuration_errors_exit_two_with_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"batch_size": 0}"#).unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["train-align", "--no-such-flag"],
        vec!["train-align", "--tap", "middle"],
        vec!["ablate", "--axis", "depth"],
        vec!["train-align", "--config", bad.to_str().unwrap()],
    ];
    for args in cases {
        let out = alignlab(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert_eq!(stdout.lines().count(), 1, "{args:?}: {stdout}");
        assert_eq!(stdout_json(&out)["error"], "config", "{args:?}");
    }
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.x2i");
    let out = alignlab(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let v = stdout_json(&out);
    assert_eq!(v["error"], "runtime");
    assert!(v["message"].as_str().unwrap().contains("none.x2i"));
}

#[test]
fn train_align_writes_artifacts_and_reproduces_from_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let first = dir.path().join("first");
    let out = alignlab(&["train-align", "--config", &cfg, "--seed", "3", "--out", first.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let summary = stdout_json(&out);
    for file in ["config.json", "checkpoint.x2i", "metrics.jsonl"] {
        assert!(first.join(file).exists(), "{file}");
    }
    assert_eq!(std::fs::read_to_string(first.join("metrics.jsonl")).unwrap().lines().count(), 3);
    let echoed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(first.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 3);

    let second = dir.path().join("second");
    let echoed_path = first.join("config.json");
    let out = alignlab(&["train-align", "--config", echoed_path.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let again = stdout_json(&out);
    assert!(summary["checkpoint_hash"].is_string());
    assert_eq!(summary["checkpoint_hash"], again["checkpoint_hash"]);
    assert_eq!(
        std::fs::read(first.join("checkpoint.x2i")).unwrap(),
        std::fs::read(second.join("checkpoint.x2i")).unwrap()
    );

    let ckpt = first.join("checkpoint.x2i");
    let eval = alignlab(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(eval.status.code(), Some(0));
    let v = stdout_json(&eval);
    assert!(v["heldout"]["cosine"].as_f64().is_some(), "{v}");
}
