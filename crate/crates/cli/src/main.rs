//! `gta` — experiment driver for the transferable-attack workbench.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ExperimentConfig, Workspace};
use gta_core::GtaError;

#[derive(Parser)]
#[command(name = "gta", version, about = "Generalized transferable attack workbench")]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(short, long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    /// Output directory root; defaults to $GTA_OUT or ./out.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets and train all source and target classifiers.
    Prepare,
    /// Train an attacker artifact.
    Train {
        /// ice, sa, or uap.
        method: String,
    },
    /// Evaluate an attack method against every target model.
    AttackEval {
        /// ice, sa, uap, fgsm, pgd, mi, di, ti-dim, or joint.
        method: String,
        /// Also write noise/spectrum panels for one sampled noise.
        #[arg(long)]
        spectrum: bool,
    },
    /// Within- and cross-dataset universality studies for ICE noise.
    TransferStudy,
    /// Noise and spectrum panels for a trained attacker.
    Spectrum { method: String },
    /// Merge per-method row reports into a method x target matrix.
    Report,
}

fn exit_category(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<GtaError>() {
        Some(GtaError::Invalid(_)) => 2,
        Some(GtaError::Shape(_)) => 3,
        Some(GtaError::UnknownFormat(_)) => 4,
        Some(GtaError::UnknownArchitecture(_)) => 5,
        Some(GtaError::Corrupt(_)) => 6,
        Some(GtaError::Training(_)) => 7,
        Some(GtaError::Missing(_)) => 8,
        Some(GtaError::Io(_)) => 9,
        None => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let out = cli
        .out
        .or_else(|| std::env::var_os("GTA_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let ws = Workspace::new(out);
    let cfg = ExperimentConfig::load(&cli.config)?;
    match cli.command {
        Command::Prepare => commands::cmd_prepare(&cfg, &ws),
        Command::Train { method } => commands::cmd_train(&cfg, &ws, &method),
        Command::AttackEval { method, spectrum } => commands::cmd_attack_eval(&cfg, &ws, &method, spectrum),
        Command::TransferStudy => commands::cmd_transfer_study(&cfg, &ws),
        Command::Spectrum { method } => commands::cmd_spectrum(&cfg, &ws, &method),
        Command::Report => commands::cmd_report(&ws),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_category(&err))
        }
    }
}
