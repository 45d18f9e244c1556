use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use projsel::pipeline::{run_all, run_stage, RunConfig, Stage};
use serde_json::json;

/// Learned, task-driven CT projection selection.
#[derive(Debug, Parser)]
#[command(name = "projsel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate projections of every specimen at every scan position.
    Simulate(Common),
    /// Compute projection-dependent detectability per specimen.
    Pdi(Common),
    /// Build greedy supervision labels from detectability.
    Label(Common),
    /// Train the regressor on the training specimens.
    Train(Common),
    /// Predict projection subsets with the trained regressor.
    Predict(Common),
    /// Reconstruct test specimens from all, labelled and predicted projections.
    Reconstruct(Common),
    /// Write ROI metrics and slice images.
    Evaluate(Common),
    /// Run every stage in order.
    Run(Common),
    /// Print the resolved configuration.
    Config(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; the built-in desk-scale setup when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed, overriding `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// `dotted.key=value` override applied to the configuration (repeatable).
    #[arg(long = "stage-override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> projsel::Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(out) = &self.out {
            overrides.push(format!("output_dir={}", json!(out)));
        }
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        match &self.config {
            Some(path) => RunConfig::load(path, &overrides),
            None => {
                let base = serde_json::to_string(&RunConfig::desk_scale()).expect("default config serializes");
                RunConfig::from_json(&base, &overrides)
            }
        }
    }
}

fn execute(command: Command) -> projsel::Result<serde_json::Value> {
    let (common, stage) = match command {
        Command::Simulate(c) => (c, Some(Stage::Simulate)),
        Command::Pdi(c) => (c, Some(Stage::Pdi)),
        Command::Label(c) => (c, Some(Stage::Label)),
        Command::Train(c) => (c, Some(Stage::Train)),
        Command::Predict(c) => (c, Some(Stage::Predict)),
        Command::Reconstruct(c) => (c, Some(Stage::Reconstruct)),
        Command::Evaluate(c) => (c, Some(Stage::Evaluate)),
        Command::Run(c) => {
            let cfg = c.resolve()?;
            return Ok(json!(run_all(&cfg)?));
        }
        Command::Config(c) => return Ok(json!(c.resolve()?)),
    };
    let cfg = common.resolve()?;
    let stage = stage.expect("stage commands carry a stage");
    Ok(json!(run_stage(&cfg, stage)?))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": "usage", "message": first }));
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
