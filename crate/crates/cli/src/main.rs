use std::process::ExitCode;

use actq_cli::spec::Cli;
use clap::Parser;

fn main() -> ExitCode {
    actq_cli::exit_code(actq_cli::run(Cli::parse()))
}
