use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn negpr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_negpr")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("c.json");
    let out = dir.join("run");
    let json = format!(
        r#"{{"n_source": 30, "n_target": 20, "hidden": 8, "layers": 2, "k": 3, "pretrain_epochs": 4,
            "refine_epochs": 2, "iterations": 1, "zeta": 0.5, "path_len": 2, "lr": 0.01,
            "seeds": [0, 1], "output_dir": {:?}{extra}}}"#,
        out.to_str().unwrap()
    );
    fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gradcheck_passes_and_catches_a_flipped_sign() {
    let ok = negpr(&["gradcheck", "--trials", "10"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).contains("all checks passed"));
    let bad = negpr(&["gradcheck", "--trials", "10", "--inject-sign-flip"]);
    assert_eq!(code(&bad), 3);
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn train_writes_summary_and_respects_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = negpr(&["train", "--config", &cfg, "--seed", "5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"], serde_json::json!([5]));
    assert!(dir.path().join("run/history_seed5.csv").exists());
    assert!(stdout(&out).contains("mean target"));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = negpr(&[
        "sweep", "--config", &cfg, "--param", "alpha", "--values", "0.1,0.4", "--seed", "0",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("run/sweep_alpha.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&negpr(&["train", "--config", "/nonexistent/c.json"])), 1);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"zeta": 1.5}"#).unwrap();
    assert_eq!(code(&negpr(&["train", "--config", bad.to_str().unwrap()])), 1);
    fs::write(&bad, r#"{"no_such_key": 1}"#).unwrap();
    assert_eq!(code(&negpr(&["train", "--config", bad.to_str().unwrap()])), 1);
    let cfg = write_config(dir.path(), "");
    assert_eq!(
        code(&negpr(&["sweep", "--config", &cfg, "--param", "lr", "--values", "0.1"])),
        1
    );
    assert_eq!(
        code(&negpr(&[
            "partition",
            "--data",
            "x",
            "--metric",
            "volume",
            "--out",
            "y"
        ])),
        1
    );
    assert_eq!(code(&negpr(&["frobnicate"])), 1);
    assert_eq!(code(&negpr(&["gradcheck", "--trials", "0"])), 1);
    let threads = Command::new(env!("CARGO_BIN_EXE_negpr"))
        .args(["train", "--config", &cfg])
        .env("NEGPR_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 1);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("MISSING");
    let out = negpr(&[
        "partition",
        "--data",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("parts").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    let target = dir.path().join("T");
    fs::create_dir(&target).unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            r#", "source": {:?}, "target": {:?}"#,
            missing.to_str().unwrap(),
            target.to_str().unwrap()
        ),
    );
    assert_eq!(code(&negpr(&["train", "--config", &cfg])), 2);
}

#[test]
fn help_exits_cleanly() {
    let out = negpr(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("gradcheck"));
    assert!(!stdout(&out).contains("inject-sign-flip"));
}
