use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use uswipt::runner::{self, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "uswipt",
    version,
    about = "Unified single-tone/multi-tone SWIPT link simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of a config file.
#[derive(clap::Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a config file or a preset name.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// List built-in presets.
    ListPresets,
    /// Fit piecewise-linear EH curves to a `q,p_in_dbm,p_eh_dbm` dataset.
    FitEh {
        datafile: PathBuf,
        #[arg(long)]
        segments: Option<usize>,
    },
    /// Train one controller TCN per drive point and save JSON checkpoints.
    TrainTcn {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Finite-difference check of the TCN backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(config: &Path, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(t) = o.trials {
        cfg.trials = t;
    }
    if let Some(b) = o.blocks {
        cfg.blocks = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let (paths, digests) = runner::run(&cfg, &overrides.out_dir)?;
            for d in digests {
                println!("{d}");
            }
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Command::ListPresets => {
            for (name, desc) in runner::list_presets() {
                println!("{name:<18} {desc}");
            }
        }
        Command::FitEh { datafile, segments } => {
            let text = std::fs::read_to_string(&datafile).with_context(|| format!("reading {}", datafile.display()))?;
            print!("{}", runner::fit_eh_report(&text, segments)?);
        }
        Command::TrainTcn { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            for (path, digest) in runner::train_tcn(&cfg, &overrides.out_dir)? {
                println!("{digest} -> {}", path.display());
            }
        }
        Command::Gradcheck { seed } => {
            let err = runner::gradcheck_report(seed)?;
            println!("max relative gradient error {err:.3e}");
            anyhow::ensure!(err < 1e-4, "gradient check failed");
        }
    }
    Ok(())
}
