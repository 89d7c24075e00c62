mod args;
mod baseline;
mod common;
mod config;
mod error;
mod eval;
mod gen;
mod report;
mod run;

use std::panic;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use config::resolve;
use error::{CliResult, EXIT_INTERNAL};

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen(a) => gen::cmd_gen(&resolve(&a, a.config.as_deref())?),
        Command::Run(a) => run::cmd_run(&resolve(a.as_ref(), a.config.as_deref())?),
        Command::Eval(a) => eval::cmd_eval(&resolve(&a, a.config.as_deref())?),
        Command::Baseline(a) => baseline::cmd_baseline(&resolve(&a, a.config.as_deref())?),
        Command::Report(a) => report::cmd_report(&resolve(&a, a.config.as_deref())?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match panic::catch_unwind(|| dispatch(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
        Err(_) => {
            eprintln!("error: internal invariant violated");
            ExitCode::from(EXIT_INTERNAL)
        }
    }
}
