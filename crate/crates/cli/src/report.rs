//! Plain-text rendering of train and sweep summaries.

use std::fmt::Write;
use std::path::Path;

use actq::train::RunStatus;

use crate::run::{RunSummary, SweepSummary, TrainSummary};
use crate::CliError;

fn accuracy(a: Option<f64>) -> String {
    a.map_or_else(|| "-".into(), |a| format!("{a:.4}"))
}

fn status(s: &RunStatus) -> &'static str {
    match s {
        RunStatus::Completed => "ok",
        RunStatus::Diverged { .. } => "diverged",
    }
}

fn run_line(out: &mut String, r: &RunSummary) {
    let _ = writeln!(
        out,
        "{:>6} {:>9} {:>9} {:>12} {:>12} {:>10} {:>9.1}",
        r.seed,
        status(&r.status),
        accuracy(r.eval_accuracy),
        r.ledger.as_ref().map_or(0, |l| l.baseline_bytes),
        r.ledger.as_ref().map_or(0, |l| l.actual_bytes),
        r.reduction_ratio
            .map_or_else(|| "-".into(), |x| format!("{x:.4}")),
        r.runtime_seconds,
    );
}

pub fn train_table(s: &TrainSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6} {:>9} {:>9} {:>12} {:>12} {:>10} {:>9}",
        "seed", "status", "eval_acc", "baseline_B", "actual_B", "reduction", "seconds"
    );
    for r in &s.runs {
        run_line(&mut out, r);
    }
    let _ = writeln!(
        out,
        "mean eval accuracy: {}",
        accuracy(s.mean_eval_accuracy)
    );
    if let Some(l) = s.runs.first().and_then(|r| r.ledger.as_ref()) {
        out.push('\n');
        out += &l.to_table();
    }
    out
}

pub fn sweep_table(s: &SweepSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>12} {:>12} {:>10} {:>9}",
        "row", "baseline_B", "actual_B", "reduction", "eval_acc"
    );
    for r in &s.rows {
        let _ = writeln!(
            out,
            "{:<12} {:>12} {:>12} {:>10.4} {:>9}",
            r.name,
            r.baseline_bytes,
            r.actual_bytes,
            r.reduction_ratio,
            accuracy(r.mean_eval_accuracy)
        );
    }
    out
}

/// Renders `dir/summary.json`, whichever command wrote it.
pub fn render(dir: &Path) -> Result<String, CliError> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    if let Ok(s) = serde_json::from_str::<SweepSummary>(&text) {
        return Ok(sweep_table(&s));
    }
    if let Ok(s) = serde_json::from_str::<TrainSummary>(&text) {
        return Ok(train_table(&s));
    }
    let run: RunSummary = serde_json::from_str(&text)?;
    Ok(train_table(&TrainSummary {
        spec: run.spec.clone(),
        mean_eval_accuracy: run.eval_accuracy,
        runs: vec![run],
    }))
}
