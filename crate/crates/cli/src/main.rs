mod commands;
mod config;
mod error;
mod output;

use std::process::ExitCode;

use clap::Parser;

use crate::config::{Cli, Command, LOG_ENV};
use crate::error::CliError;

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Basis(a) => commands::run(&a.resolve()?, Some(&a.out)),
        Command::Estimate(a) => commands::run(&a.resolve()?, Some(&a.out)),
        Command::Simulate(a) => commands::run(&a.resolve()?, Some(&a.out)),
        Command::FitLognormal(a) => commands::run(&a.resolve()?, a.out.as_deref()),
        Command::Replay(a) => {
            let m = commands::read_manifest(&a.manifest)?;
            commands::run(&m.config, Some(&a.out))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
