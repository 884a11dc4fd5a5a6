use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sbfm_cli::commands::{cmd_attack, cmd_sweep, cmd_train};
use sbfm_cli::config::{parse_epsilon_list, parse_seed_list, RunConfig};
use sbfm_cli::CliError;

/// Train, attack, and sweep harness for binary-feature robustness
/// experiments. Runs are driven by a key = value config file; the flags
/// below override individual settings.
#[derive(Parser)]
#[command(name = "sbfm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory (overrides `out_dir`)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed list, e.g. `1,2,3` (overrides `seeds`)
    #[arg(long, value_name = "N[,N...]")]
    seed: Option<String>,
    /// Epsilon list, e.g. `1/255,8/255` (overrides `epsilons`)
    #[arg(long, value_name = "LIST")]
    epsilons: Option<String>,
    /// Cap on training images per class, 0 = all (overrides config)
    #[arg(long, value_name = "N")]
    subset_per_class: Option<usize>,
    /// Keep the binary feature module at its initialization
    #[arg(long)]
    freeze_sbfm: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed; writes metrics, checkpoints, and a summary
    Train(CommonArgs),
    /// Evaluate checkpoints under FGSM across the epsilon schedule
    Attack {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to attack (repeatable; extends `checkpoints`)
        #[arg(long, value_name = "PATH")]
        checkpoint: Vec<PathBuf>,
    },
    /// Train and attack a fused model for every (l, t) grid cell
    Sweep(CommonArgs),
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::from_file(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = &common.seed {
        cfg.seeds = parse_seed_list(seed)?;
    }
    if let Some(eps) = &common.epsilons {
        cfg.epsilons = parse_epsilon_list(eps)?;
    }
    if let Some(cap) = common.subset_per_class {
        cfg.subset_per_class = cap;
    }
    if common.freeze_sbfm {
        cfg.freeze_sbfm = true;
    }
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    match Cli::parse().command {
        Command::Train(common) => cmd_train(&load_config(&common)?),
        Command::Attack { common, checkpoint } => {
            let mut cfg = load_config(&common)?;
            cfg.checkpoints.extend(checkpoint);
            cmd_attack(&cfg)
        }
        Command::Sweep(common) => cmd_sweep(&load_config(&common)?),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code.clamp(1, 255) as u8)
        }
    }
}
