//! `cr3d`: change retrieval over 3D local maps, one subcommand per stage.
//!
//! Exit status: 0 on success, 1 on usage or configuration errors, 2 on data
//! errors (unreadable or malformed inputs, violated preconditions).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "cr3d", version, about = "Point-cloud change retrieval")]
struct Cli {
    /// Pipeline configuration file (flat `key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set words=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fuse a scan sequence into local maps.
    BuildMap(ScanArgs),
    /// Mine TDF training pairs from a scan sequence.
    MinePairs(ScanArgs),
    /// Generate synthetic reference/query scenes and their ground truth.
    Synth(commands::SynthArgs),
    /// Describe clouds: ICS alignment, keypoints, descriptors.
    Extract(commands::ExtractArgs),
    /// Train a visual vocabulary over descriptor files or clouds.
    TrainVocab(commands::TrainVocabArgs),
    /// Quantize reference images and build the inverted index.
    Index(commands::IndexArgs),
    /// Rank reference images for each query.
    Localize(commands::LocalizeArgs),
    /// Rank query keypoints by likelihood of change.
    Detect(commands::DetectArgs),
    /// Score change reports and rankings against ground truth.
    Evaluate(commands::EvaluateArgs),
    /// Print the effective configuration.
    Config,
}

#[derive(Debug, Args)]
struct ScanArgs {
    /// Directory of scans (`.ply` or `.xyz`), taken in file-name order.
    #[arg(long)]
    scans: PathBuf,
    /// Odometry file: one `t tx ty tz rx ry rz` line per scan (axis-angle).
    #[arg(long)]
    odometry: PathBuf,
    /// Output: map directory for build-map, TPR1 file for mine-pairs.
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides).map_err(commands::usage)?;
    match cli.command {
        Command::BuildMap(a) => commands::build_map(&cfg, &a.scans, &a.odometry, &a.out),
        Command::MinePairs(a) => commands::mine_pairs(&cfg, &a.scans, &a.odometry, &a.out),
        Command::Synth(a) => commands::synth(&cfg, &a),
        Command::Extract(a) => commands::extract(&cfg, &a),
        Command::TrainVocab(a) => commands::train_vocab(&cfg, &a),
        Command::Index(a) => commands::index(&cfg, &a),
        Command::Localize(a) => commands::localize(&cfg, &a),
        Command::Detect(a) => commands::detect(&cfg, &a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<commands::UsageError>()) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
