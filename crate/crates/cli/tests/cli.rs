use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rpf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpf-highway"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rpf(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &str = "eval_episodes = 3\n[ensemble]\nmembers = 2\n[ensemble.learning]\nlearning_starts = 300\ntarget_update = 200\n";

fn train_small(dir: &Path) {
    let config = dir.join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let out = dir.join("run");
    ok(&[
        "train",
        "--seed",
        "5",
        "--steps",
        "1000",
        "--eval-interval",
        "500",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
}

#[test]
fn train_evaluate_scenario_compare() {
    let tmp = tempfile::tempdir().unwrap();
    train_small(tmp.path());
    let run = tmp.path().join("run");
    for f in ["config.toml", "baseline.csv", "metrics.csv", "training_log.csv", "report.txt"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = run.join("checkpoint_1000");
    ok(&["evaluate", "--checkpoint", ckpt.to_str().unwrap()]);
    let eval = fs::read_to_string(run.join("evaluation_1000.csv")).unwrap();
    assert_eq!(eval.lines().nth(1), metrics.lines().nth(2));

    let stdout = ok(&["scenario", "--checkpoint", ckpt.to_str().unwrap(), "--scenario", "stopped", "--gate", "on"]);
    assert!(stdout.contains("steps"));
    let trace = fs::read_to_string(run.join("trace_stopped.csv")).unwrap();
    assert!(trace.starts_with("step,"));

    let cmp = tmp.path().join("cmp");
    ok(&["compare", run.to_str().unwrap(), "--out", cmp.to_str().unwrap()]);
    assert!(fs::read_to_string(cmp.join("compare.csv")).unwrap().starts_with("training_step,run:rpf_"));

    // Resuming to a later step continues the metrics file.
    ok(&["train", "--resume", ckpt.to_str().unwrap(), "--steps", "1500"]);
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 4);
}

#[test]
fn usage_errors_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();

    let r = rpf(&["train", "--steps", "10", "--out", out]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("seed"));

    let r = rpf(&["evaluate", "--agent", "heuristic", "--out", out]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("baseline"));

    ok(&["baseline", "--out", out]);
    let stdout = ok(&["evaluate", "--agent", "heuristic", "--out", out]);
    assert!(stdout.contains("normalized return 1.000"));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[ensemble]\np_add = 3.0\n").unwrap();
    assert!(!rpf(&["train", "--seed", "1", "--config", bad.to_str().unwrap()]).status.success());
}
