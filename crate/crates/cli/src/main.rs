use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pipa_cli::commands::{cmd_gen, cmd_report, cmd_train, cmd_verify, CliError};
use pipa_cli::config::ExperimentConfig;

/// Desk-scale preference-alignment laboratory: generate synthetic worlds,
/// train the loss zoo, verify the equivalence identities, and plot runs.
///
/// Exit codes: 0 success, 1 verification-check failure, 2 usage or config
/// error, 3 numeric error.
#[derive(Parser)]
#[command(name = "pipa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the world checkpoint, dataset files, and digest manifest.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Re-derive every seed from one value.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Fit the prior, train the configured loss, and write checkpoints
    /// plus the metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Run verification checks; non-zero exit when any check fails.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
        /// Run a single named check instead of the configured list.
        #[arg(long)]
        only: Option<String>,
    },
    /// Plot metric trajectories of one or more runs as standalone SVGs.
    Report {
        /// Run directories containing metrics.csv.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output directory; defaults to the first run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(
    path: &PathBuf,
    out: Option<PathBuf>,
    seed_override: Option<u64>,
) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Usage(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(dir) = out {
        cfg.out_dir = dir;
    }
    if let Some(seed) = seed_override {
        cfg.apply_seed_override(seed);
    }
    Ok(cfg)
}

fn run() -> Result<bool, CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen {
            config,
            out,
            seed_override,
        } => {
            cmd_gen(&load_config(&config, out, seed_override)?)?;
            Ok(true)
        }
        Command::Train {
            config,
            out,
            seed_override,
        } => {
            cmd_train(&load_config(&config, out, seed_override)?)?;
            Ok(true)
        }
        Command::Verify {
            config,
            out,
            seed_override,
            only,
        } => {
            let cfg = load_config(&config, out, seed_override)?;
            cmd_verify(&cfg, only.as_deref())
        }
        Command::Report { runs, out } => {
            let out_dir = out.unwrap_or_else(|| runs[0].clone());
            cmd_report(&runs, &out_dir)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
