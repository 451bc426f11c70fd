use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use driftwatch_cli::commands::{cmd_demo_pitfall, cmd_eval, cmd_gen, cmd_monitor, CliError};
use driftwatch_cli::formats::read_document;
use driftwatch_core::eval::EvalConfig;

/// Share-drift observability: geometry-aware monitoring of compositional
/// telemetry with churn-stable grouping and boundary diagnostics.
#[derive(Parser)]
#[command(name = "driftwatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled trace from a scenario document.
    Gen {
        /// Scenario document (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for observations.jsonl, lineage.jsonl, truth.json.
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the monitor over an observation stream, one report per line.
    Monitor {
        /// Monitor configuration document (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Observations, line-delimited JSON sorted by t.
        #[arg(long = "in")]
        input: PathBuf,
        /// Lineage events, line-delimited JSON (optional).
        #[arg(long)]
        lineage: Option<PathBuf>,
        /// Report output path (line-delimited JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a report stream against generated truth.
    Eval {
        /// Reports, line-delimited JSON.
        #[arg(long = "in")]
        input: PathBuf,
        /// Truth document from `gen`.
        #[arg(long)]
        truth: PathBuf,
        /// Harness tuning document (JSON, optional).
        #[arg(long)]
        eval_config: Option<PathBuf>,
        /// Output directory for metrics.json and baselines.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the worked example contrasting raw-share Euclidean monitoring
    /// with ratio-aware monitoring.
    DemoPitfall {
        /// Output directory for demo.csv and reports.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen { config, out, seed } => cmd_gen(&config, &out, seed),
        Command::Monitor {
            config,
            input,
            lineage,
            out,
        } => cmd_monitor(&config, &input, lineage.as_deref(), &out),
        Command::Eval {
            input,
            truth,
            eval_config,
            out,
        } => {
            let config: Option<EvalConfig> = match eval_config {
                Some(path) => Some(read_document(&path)?),
                None => None,
            };
            cmd_eval(&input, &truth, config, &out)
        }
        Command::DemoPitfall { out } => cmd_demo_pitfall(&out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.record());
            ExitCode::FAILURE
        }
    }
}
