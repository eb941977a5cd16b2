//! Experiment runner for `actq`: training runs, ablation sweeps, quantizer
//! microbenchmarks and summary reports.

pub mod microbench;
pub mod report;
pub mod run;
pub mod spec;

use std::process::ExitCode;

use spec::{Cli, Command, CommandKind, RunSpec, SEED_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Core(#[from] actq::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Invariant(_) => 4,
            _ => 1,
        }
    }
}

/// Runs a parsed command line, printing a short summary to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let env_seed = std::env::var(SEED_ENV).ok();
    match cli.command {
        Command::Train(args) => {
            let spec = RunSpec::resolve(CommandKind::Train, &args, None, env_seed.as_deref())?;
            let summary = run::train(&spec)?;
            print!("{}", report::train_table(&summary));
        }
        Command::Sweep(args) => {
            let spec = RunSpec::resolve(
                CommandKind::Sweep,
                &args.run,
                Some(args.axis),
                env_seed.as_deref(),
            )?;
            let summary = run::sweep(&spec)?;
            print!("{}", report::sweep_table(&summary));
        }
        Command::Microbench(args) => {
            let result = microbench::run(&args)?;
            if let Some(out) = &args.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(
                    out.join("microbench.json"),
                    serde_json::to_string_pretty(&result)? + "\n",
                )?;
            }
            print!("{}", result.to_table());
        }
        Command::Report(args) => print!("{}", report::render(&args.dir)?),
    }
    Ok(())
}

pub fn exit_code(result: Result<(), CliError>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("actq: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
