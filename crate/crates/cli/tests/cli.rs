use std::path::Path;
use std::process::{Command, Output};

use actq_cli::run::TrainSummary;

fn actq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actq"))
        .args(args)
        .env_remove("MESA_SEED")
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_artifacts_and_report_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let out = actq(&[
        "train",
        "--steps",
        "12",
        "--seeds",
        "3,4",
        "--compress",
        "all",
        "--out",
        path(dir.path()),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for seed in [3, 4] {
        let run = dir.path().join(format!("seed-{seed}"));
        for f in [
            "metrics.jsonl",
            "trajectories.csv",
            "summary.json",
            "ledger.txt",
        ] {
            assert!(run.join(f).is_file(), "missing {f}");
        }
        let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
        // stride 10 plus the final step
        assert_eq!(metrics.lines().count(), 2);
        let csv = std::fs::read_to_string(run.join("trajectories.csv")).unwrap();
        assert!(csv.starts_with("step,layer,group,alpha,beta"));
    }
    let summary: TrainSummary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary.runs.len(), 2);
    assert!(summary
        .runs
        .iter()
        .all(|r| r.reduction_ratio.unwrap() > 0.6));

    let report = actq(&["report", path(dir.path())]);
    assert!(report.status.success());
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.contains("mean eval accuracy"), "{text}");
    assert!(text.contains("matmul"), "{text}");
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["train", "--scheme", "symmetric", "--stats", "per-sample"][..],
        &["train", "--compress", "bogus"],
        &["train", "--seed", "1", "--seeds", "1,2"],
        &["sweep"],
    ] {
        let out = actq(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    let missing = actq(&["report", "/nonexistent/actq"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn divergence_exits_3_and_still_writes_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = actq(&[
        "train",
        "--steps",
        "5",
        "--lr",
        "1e30",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let summary = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    assert!(summary.contains("diverged"));
}

#[test]
fn config_file_and_env_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "steps = 3\ncompress = \"softmax\"\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = Command::new(env!("CARGO_BIN_EXE_actq"))
        .args(["train", "--config", path(&cfg), "--out", path(&out_dir)])
        .env("MESA_SEED", "11")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: TrainSummary =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary.runs[0].seed, 11);
    assert_eq!(summary.runs[0].steps_completed, 3);
    let ratio = summary.runs[0].reduction_ratio.unwrap();
    assert!(ratio > 0.0 && ratio < 0.2, "{ratio}");
}

#[test]
fn microbench_reports_both_roundings() {
    let dir = tempfile::tempdir().unwrap();
    let out = actq(&[
        "microbench",
        "--elements",
        "4096",
        "--iters",
        "2",
        "--out",
        path(dir.path()),
    ]);
    assert!(out.status.success());
    let report: actq_cli::microbench::MicrobenchReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("microbench.json")).unwrap())
            .unwrap();
    assert_eq!(report.kernels.len(), 2);
    for k in &report.kernels {
        assert_eq!(k.histogram.iter().sum::<u64>(), report.elements as u64);
        assert!(k.max_error_steps <= 1.0 + 1e-3);
    }
}
