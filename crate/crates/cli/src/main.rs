//! `tabctx` command-line driver.
//!
//! Every command prints a one-line JSON summary on success. Failures print
//! one JSON line `{"error": <kind>, "message": <text>}` on stderr and exit
//! nonzero.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use commands::{EnsembleArgs, EvalArgs, PredictArgs, ReportArgs, RouteArgs, SynthArgs};
use config::CommonArgs;

#[derive(Debug, Parser)]
#[command(name = "tabctx", version, about = "Instance-level ensembling of tabular model pools")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a bundle and cache its encoder and feature weights.
    Ingest,
    /// Write per-row hardness verdicts.
    Route(RouteArgs),
    /// Router, then fallback or backend, for one split.
    Predict(PredictArgs),
    /// Voting baselines and the meta learner on the test split.
    Ensemble(EnsembleArgs),
    /// Seed-repeated scores for one dataset, written to eval.json.
    Eval(EvalArgs),
    /// Merge eval.json files into the report CSVs.
    Report(ReportArgs),
    /// Write a seeded synthetic bundle.
    Synth(SynthArgs),
}

/// A failure reported as a single machine-parsable line.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: "config",
            message: message.into(),
        }
    }

    pub fn backend(message: impl Into<String>) -> Self {
        Self {
            kind: "backend",
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            "usage" | "config" => 2,
            "backend" => 3,
            _ => 1,
        }
    }
}

impl From<tabctx::Error> for Failure {
    fn from(e: tabctx::Error) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = config::RunConfig::resolve(&cli.common)?;
    match cli.command {
        Command::Ingest => commands::ingest(&cfg),
        Command::Route(a) => commands::route(&cfg, &a),
        Command::Predict(a) => commands::predict(&cfg, &a),
        Command::Ensemble(a) => commands::ensemble(&cfg, &a),
        Command::Eval(a) => commands::eval(&cfg, &a),
        Command::Report(a) => commands::report(&cfg, &a),
        Command::Synth(a) => commands::synth(&cfg, &a),
    }
}

fn fail(f: &Failure) -> ExitCode {
    eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
    ExitCode::from(f.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail(&Failure {
                kind: "usage",
                message: first.trim_start_matches("error: ").to_string(),
            });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}
