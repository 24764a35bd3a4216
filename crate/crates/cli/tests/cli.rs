use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphreason"))
        .args(args)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("output line")).expect("json")
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["adapt", "--data", "x.jsonl"]).status.code(), Some(1));
    assert_eq!(
        run(&["gen-data", "--out", "x.jsonl"]).status.code(),
        Some(1)
    );
    assert_eq!(
        run(&["finetune", "--task", "reason", "--data", "d", "--out", "o"])
            .status
            .code(),
        Some(1)
    );
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.jsonl");
    let bad = run(&[
        "gen-data",
        "--synthetic",
        "--samples",
        "10",
        "--val-fraction",
        "1.5",
        "--out",
        p(&out),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    let missing_cfg = run(&["--config", "/nonexistent.toml", "selftest"]);
    assert_eq!(missing_cfg.status.code(), Some(1));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["adapt", "--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = dir.path().join("m");
    assert_eq!(
        run(&["adapt", "--data", p(&missing), "--out", p(&out)])
            .status
            .code(),
        Some(2)
    );
    let garbage = dir.path().join("garbage.jsonl");
    std::fs::write(&garbage, "{not json}\n").unwrap();
    assert_eq!(
        run(&["adapt", "--data", p(&garbage), "--out", p(&out)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn selftest_passes() {
    let out = run(&["selftest"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("selftest passed"));
}

#[test]
fn config_file_values_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        "seed = 5\n[datagen]\nmax_hops = 2\nval_fraction = 0.25\n[synthetic]\nentities = 60\nrelations = 5\n\
         [model]\nd_model = 16\nheads = 2\nd_ff = 32\nmax_len = 64\n[adapt]\nepochs = 1\nlr = 0.002\n",
    )
    .unwrap();
    let data = dir.path().join("d.jsonl");
    let out = run(&[
        "--config",
        p(&cfg),
        "gen-data",
        "--synthetic",
        "--samples",
        "40",
        "--out",
        p(&data),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = stdout_json(&out);
    assert_eq!(summary["seed"], 5);
    assert_eq!(summary["validation"], 10);
    let text = std::fs::read_to_string(&data).unwrap();
    for line in text.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(
            r["path"].as_array().unwrap().len() <= 5,
            "max_hops from the file applies"
        );
    }

    let model = dir.path().join("m");
    let out = run(&[
        "--config",
        p(&cfg),
        "adapt",
        "--data",
        p(&data),
        "--out",
        p(&model),
        "--lr",
        "0.01",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(model.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["lr"], 0.01, "flag overrides the file");
    assert_eq!(
        report["epochs"].as_array().unwrap().len(),
        1,
        "file overrides the default"
    );
    assert_eq!(report["seed"], 5);
    assert_eq!(report["batch_size"], 40);
    assert_eq!(report["structural_mask"], true);
}
