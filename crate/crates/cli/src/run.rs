//! Executes train and sweep specs and writes their artifacts.
//!
//! Layout of an output directory:
//!
//! ```text
//! out/summary.json                     whole invocation
//! out/seed-<s>/{metrics.jsonl, trajectories.csv, summary.json, ledger.txt}
//! out/<row>/seed-<s>/...               sweeps: one directory per row
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use actq::layers::{CompressionPolicy, Granularity, ModuleFlags, OpFlags};
use actq::ledger::{LedgerReport, OpKind};
use actq::quant::{Rounding, Scheme, StatsMode};
use actq::task::SyntheticTask;
use actq::train::{RunStatus, TrainReport, Trainer};
use actq::{Precision, Scalar};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::spec::{RunSpec, SweepAxis};
use crate::CliError;

/// Summary of one training run (one seed of one row).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub spec: RunSpec,
    pub row: Option<String>,
    pub seed: u64,
    pub status: RunStatus,
    pub steps_completed: u64,
    pub param_count: usize,
    pub eval_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub reduction_ratio: Option<f64>,
    pub ledger: Option<LedgerReport>,
    pub peak_baseline_bytes: u64,
    pub peak_actual_bytes: u64,
    pub runtime_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub spec: RunSpec,
    pub mean_eval_accuracy: Option<f64>,
    pub runs: Vec<RunSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub name: String,
    /// The spec this row ran with, policy included.
    pub spec: RunSpec,
    pub baseline_bytes: u64,
    pub actual_bytes: u64,
    pub reduction_ratio: f64,
    pub mean_eval_accuracy: Option<f64>,
    pub runs: Vec<RunSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub spec: RunSpec,
    pub axis: SweepAxis,
    pub rows: Vec<RowSummary>,
}

/// Named policies for each row of an ablation axis, starting from `base`.
pub fn sweep_rows(axis: SweepAxis, base: &CompressionPolicy) -> Vec<(String, CompressionPolicy)> {
    let row = |name: &str, p: CompressionPolicy| (name.to_string(), p);
    let quant = |f: &dyn Fn(&mut actq::quant::QuantConfig)| {
        let mut p = *base;
        f(&mut p.quant);
        p
    };
    match axis {
        SweepAxis::CompressOp => {
            let mut rows = vec![row("none", base.with_ops(OpFlags::NONE))];
            for op in [
                OpKind::MatMul,
                OpKind::Gelu,
                OpKind::LayerNorm,
                OpKind::Softmax,
            ] {
                rows.push(row(op.name(), base.with_ops(OpFlags::only(op))));
            }
            rows.push(row("all", base.with_ops(OpFlags::ALL)));
            rows
        }
        SweepAxis::CompressModule => {
            let m = |msa, ffn| base.with_modules(ModuleFlags { msa, ffn });
            vec![
                row("none", base.with_ops(OpFlags::NONE)),
                row("msa", m(true, false)),
                row("ffn", m(false, true)),
                row("msa+ffn", m(true, true)),
            ]
        }
        SweepAxis::Rounding => vec![
            row("stochastic", quant(&|q| q.rounding = Rounding::Stochastic)),
            row("nearest", quant(&|q| q.rounding = Rounding::Nearest)),
        ],
        SweepAxis::Stats => vec![
            row("running", quant(&|q| q.stats = StatsMode::RunningEstimate)),
            row("per-sample", quant(&|q| q.stats = StatsMode::PerSample)),
        ],
        SweepAxis::Scheme => vec![
            row("asymmetric", quant(&|q| q.scheme = Scheme::Asymmetric)),
            row("symmetric", quant(&|q| q.scheme = Scheme::Symmetric)),
        ],
        SweepAxis::Granularity => vec![
            row("head", base.with_granularity(Granularity::Head)),
            row("layer", base.with_granularity(Granularity::Layer)),
        ],
        SweepAxis::Lambda => [0.0, 0.9, 0.99, 0.999]
            .into_iter()
            .map(|l: f32| (format!("lambda-{l}"), quant(&|q| q.lambda = l)))
            .collect(),
    }
}

struct Job {
    spec: RunSpec,
    row: Option<String>,
    seed: u64,
    dir: PathBuf,
}

fn single_seed(spec: &RunSpec, seed: u64) -> RunSpec {
    let mut s = spec.clone();
    s.seeds = vec![seed];
    s.train.seed = seed;
    s
}

fn execute(job: &Job) -> Result<RunSummary, CliError> {
    match job.spec.train.precision {
        Precision::Standard => execute_typed::<f32>(job),
        Precision::Oracle => execute_typed::<f64>(job),
    }
}

fn execute_typed<T: Scalar>(job: &Job) -> Result<RunSummary, CliError> {
    let spec = &job.spec;
    let mut task = SyntheticTask::new(
        spec.task,
        spec.model.vocab_size,
        spec.model.seq_len,
        job.seed,
    )?;
    task.max_markers = spec.max_markers;
    let start = Instant::now();
    let report = Trainer::<T>::new(spec.model, task, spec.train.clone())?.run()?;
    let runtime_seconds = start.elapsed().as_secs_f64();
    fs::create_dir_all(&job.dir)?;
    write_artifacts(&job.dir, &report)?;
    let summary = RunSummary {
        spec: spec.clone(),
        row: job.row.clone(),
        seed: job.seed,
        status: report.status.clone(),
        steps_completed: report.steps_completed,
        param_count: report.param_count,
        eval_accuracy: report.eval_accuracy,
        final_loss: report.final_loss,
        reduction_ratio: report.ledger.as_ref().map(|l| l.reduction_ratio),
        ledger: report.ledger.clone(),
        peak_baseline_bytes: report.peak_bytes.0,
        peak_actual_bytes: report.peak_bytes.1,
        runtime_seconds,
    };
    write_json(&job.dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// `metrics.jsonl`, `trajectories.csv` and `ledger.txt`. Deterministic for a
/// given spec: nothing time-dependent goes into these files.
pub fn write_artifacts(dir: &Path, report: &TrainReport) -> Result<(), CliError> {
    let mut metrics = BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?);
    for m in &report.metrics {
        serde_json::to_writer(&mut metrics, m)?;
        metrics.write_all(b"\n")?;
    }
    metrics.flush()?;

    let mut traj = csv::Writer::from_path(dir.join("trajectories.csv"))?;
    if report.trajectories.is_empty() {
        traj.write_record(["step", "layer", "group", "alpha", "beta"])?;
    }
    for row in &report.trajectories {
        traj.serialize(row)?;
    }
    traj.flush()?;

    if let Some(ledger) = &report.ledger {
        fs::write(dir.join("ledger.txt"), ledger.to_table())?;
    }
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn run_jobs(jobs: Vec<Job>, threads: usize) -> Result<Vec<RunSummary>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} workers: {e}")))?;
    pool.install(|| jobs.par_iter().map(execute).collect())
}

fn mean_accuracy(runs: &[RunSummary]) -> Option<f64> {
    let accs: Option<Vec<f64>> = runs.iter().map(|r| r.eval_accuracy).collect();
    accs.map(|a| a.iter().sum::<f64>() / a.len() as f64)
}

fn check_runs(runs: &[RunSummary]) -> Result<(), CliError> {
    for r in runs {
        if let Some(l) = &r.ledger {
            if !l.is_conserved() {
                return Err(CliError::Invariant(format!(
                    "ledger rows do not sum to totals for seed {}",
                    r.seed
                )));
            }
            if l.actual_bytes > l.baseline_bytes {
                return Err(CliError::Invariant(format!(
                    "compressed storage exceeds the baseline for seed {}",
                    r.seed
                )));
            }
        }
    }
    Ok(())
}

fn diverged(runs: &[RunSummary]) -> Option<String> {
    runs.iter().find_map(|r| match &r.status {
        RunStatus::Diverged { step, reason } => Some(format!(
            "{}seed {} at step {step}: {reason}",
            r.row.as_ref().map(|n| format!("{n}, ")).unwrap_or_default(),
            r.seed
        )),
        RunStatus::Completed => None,
    })
}

pub fn train(spec: &RunSpec) -> Result<TrainSummary, CliError> {
    fs::create_dir_all(&spec.out)?;
    let jobs = spec
        .seeds
        .iter()
        .map(|&seed| Job {
            spec: single_seed(spec, seed),
            row: None,
            seed,
            dir: spec.out.join(format!("seed-{seed}")),
        })
        .collect();
    let runs = run_jobs(jobs, spec.jobs)?;
    let summary = TrainSummary {
        spec: spec.clone(),
        mean_eval_accuracy: mean_accuracy(&runs),
        runs,
    };
    write_json(&spec.out.join("summary.json"), &summary)?;
    check_runs(&summary.runs)?;
    if let Some(msg) = diverged(&summary.runs) {
        return Err(CliError::Diverged(msg));
    }
    Ok(summary)
}

pub fn sweep(spec: &RunSpec) -> Result<SweepSummary, CliError> {
    let axis = spec
        .sweep
        .ok_or_else(|| CliError::Usage("sweep needs an axis".into()))?;
    fs::create_dir_all(&spec.out)?;
    let rows = sweep_rows(axis, &spec.train.policy);
    let mut row_specs = Vec::new();
    let mut jobs = Vec::new();
    for (name, policy) in &rows {
        let mut row_spec = spec.clone();
        row_spec.train.policy = *policy;
        for &seed in &spec.seeds {
            jobs.push(Job {
                spec: single_seed(&row_spec, seed),
                row: Some(name.clone()),
                seed,
                dir: spec.out.join(name).join(format!("seed-{seed}")),
            });
        }
        row_specs.push(row_spec);
    }
    let mut runs = run_jobs(jobs, spec.jobs)?.into_iter();
    let mut summaries = Vec::new();
    for ((name, _), row_spec) in rows.into_iter().zip(row_specs) {
        let row_runs: Vec<RunSummary> = runs.by_ref().take(spec.seeds.len()).collect();
        let ledger = row_runs.iter().find_map(|r| r.ledger.clone());
        let (baseline_bytes, actual_bytes, reduction_ratio) = ledger
            .map(|l| (l.baseline_bytes, l.actual_bytes, l.reduction_ratio))
            .unwrap_or((0, 0, 0.0));
        summaries.push(RowSummary {
            name,
            spec: row_spec,
            baseline_bytes,
            actual_bytes,
            reduction_ratio,
            mean_eval_accuracy: mean_accuracy(&row_runs),
            runs: row_runs,
        });
    }
    let summary = SweepSummary {
        spec: spec.clone(),
        axis,
        rows: summaries,
    };
    write_json(&spec.out.join("summary.json"), &summary)?;
    for row in &summary.rows {
        check_runs(&row.runs)?;
    }
    if let Some(msg) = summary.rows.iter().find_map(|r| diverged(&r.runs)) {
        return Err(CliError::Diverged(msg));
    }
    check_sweep(&summary)?;
    Ok(summary)
}

/// Cross-row ledger checks: a policy-independent baseline, and for the
/// compression axes the ordering `all > every single row > none`.
pub fn check_sweep(s: &SweepSummary) -> Result<(), CliError> {
    let base = s.rows[0].baseline_bytes;
    if s.rows.iter().any(|r| r.baseline_bytes != base) {
        return Err(CliError::Invariant(
            "baseline bytes differ between rows".into(),
        ));
    }
    let saved = |r: &RowSummary| r.baseline_bytes - r.actual_bytes;
    match s.axis {
        SweepAxis::CompressOp | SweepAxis::CompressModule => {
            let (none, rest) = s.rows.split_first().unwrap();
            let (all, singles) = rest.split_last().unwrap();
            if saved(none) != 0 {
                return Err(CliError::Invariant("the none row saves memory".into()));
            }
            for r in singles {
                if !(saved(r) > 0 && saved(r) < saved(all)) {
                    return Err(CliError::Invariant(format!(
                        "row {} does not sit strictly between none and {}",
                        r.name, all.name
                    )));
                }
            }
            // every stored tensor belongs to exactly one op
            if s.axis == SweepAxis::CompressOp
                && singles.iter().map(saved).sum::<u64>() != saved(all)
            {
                return Err(CliError::Invariant(
                    "single-op savings do not add up to the all-ops saving".into(),
                ));
            }
        }
        _ => {}
    }
    Ok(())
}
