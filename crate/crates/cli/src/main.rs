mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser as _;
use serde_json::json;
use thiserror::Error;

use args::{Cli, Command};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Lib(#[from] gradmix::Error),
    #[error("usage: {0}")]
    Usage(String),
}

impl CliError {
    fn record(&self) -> serde_json::Value {
        let kind = match self {
            CliError::Lib(e) => e.kind(),
            CliError::Usage(_) => "usage",
        };
        json!({ "error": { "kind": kind, "message": self.to_string() } })
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => commands::run_train(a),
        Command::EvalOsr(a) => commands::run_eval_osr(a),
        Command::EvalOod(a) => commands::run_eval_ood(a),
        Command::EvalCorrupt(a) => commands::run_eval_corrupt(a),
        Command::Probe(a) => commands::run_probe(a),
        Command::ExportMaps(a) => commands::run_export_maps(a),
        Command::Report(a) => commands::run_report(a),
    }
    .map(drop)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).record());
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::FAILURE
        }
    }
}
