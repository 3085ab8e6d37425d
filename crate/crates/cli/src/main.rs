//! `probe`: ingest purchase logs, fit and evaluate the bias-embedded bundle
//! choice model, check its pricing results, and generate synthetic worlds.
//! Every run writes its outputs and a `manifest.json` into `--out`.

mod args;
mod commands;
mod config;
mod run;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::config::RunConfig;
use crate::run::{exit_code, Run, EXIT_PARSE};

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Ingest(_) => "ingest",
        Command::FitCorrelation(_) => "fit-correlation",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Theorems(_) => "theorems",
        Command::Sweep(_) => "sweep",
        Command::Synth => "synth",
        Command::Report(_) => "report",
    }
}

fn dispatch(cli: &Cli, run: &mut Run, config: &mut RunConfig) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| anyhow::anyhow!(e))?;
    match &cli.command {
        Command::Ingest(a) => commands::ingest(run, a),
        Command::FitCorrelation(a) => commands::fit_correlation(run, config, a),
        Command::Train(a) => commands::train(run, config, a),
        Command::Evaluate(a) => commands::evaluate(run, config, a),
        Command::Theorems(a) => commands::theorems(run, config, a),
        Command::Sweep(a) => commands::sweep(run, config, a),
        Command::Synth => commands::synth(run, config),
        Command::Report(a) => commands::report(run, config, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_PARSE } else { 0 });
        }
    };
    let name = command_name(&cli.command);
    let mut run = match Run::new(&cli.out) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let mut config = RunConfig::default().with_seed(cli.seed);
    let result = RunConfig::load(cli.config.as_deref()).and_then(|c| {
        if let Some(path) = &cli.config {
            run.input("config", path);
        }
        config = c.with_seed(cli.seed);
        dispatch(&cli, &mut run, &mut config)
    });
    let resolved = serde_json::to_value(&config).unwrap_or(serde_json::Value::Null);
    if let Err(e) = run.finish(name, config.seed, cli.threads, &resolved, &result) {
        eprintln!("error: {e:#}");
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
