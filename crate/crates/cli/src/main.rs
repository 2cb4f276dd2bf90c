use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use bimu_core::rules::training_state_bytes;
use bimu_core::runner::{self, histogram_csv, load_checkpoint};
use bimu_core::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "bimu", version, about = "Bounded-memory Bayesian continual learning for binary networks")]
struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment and write its result bundle.
    Run {
        config: PathBuf,
        /// Overrides the output directory in the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a stored posterior against the config's OOD source.
    EvalOod { checkpoint: PathBuf, config: PathBuf },
    /// Print the synaptic-probability histogram of a checkpoint as CSV.
    Hist {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Print the persistent training-state size for the configured method.
    Mem { config: PathBuf },
    /// Check a config and the files it references.
    Validate { config: PathBuf },
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let mut cfg = load(&config, cli.seed)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let s = runner::run_experiment(&cfg)?;
            println!(
                "{}: {} events, {} updates, query rate {:.4}, final mean accuracy {:.4}, MMRR {:.3}",
                s.method, s.events, s.updates, s.query_rate, s.final_mean_accuracy, s.mmrr
            );
            for (k, v) in &s.ood_auc {
                println!("ood auc {k}: {v:.4}");
            }
            println!("results in {}", cfg.output_dir.display());
        }
        Command::EvalOod { checkpoint, config } => {
            let cfg = load(&config, cli.seed)?;
            for (k, v) in runner::evaluate_checkpoint_ood(&cfg, &checkpoint)? {
                println!("{k},{v:.6}");
            }
        }
        Command::Hist { checkpoint, bins } => {
            if bins == 0 {
                bail!("--bins must be positive");
            }
            let (post, _) = load_checkpoint(&checkpoint)?;
            print!("{}", histogram_csv(&post, bins));
        }
        Command::Mem { config } => {
            let cfg = load(&config, cli.seed)?;
            cfg.network.validate()?;
            let bytes = training_state_bytes(cfg.method, &cfg.network);
            println!("{bytes} bytes ({:.2} MB) for {} on {} parameters", bytes as f64 / 1e6, cfg.method.name(), cfg.network.parameter_count());
        }
        Command::Validate { config } => {
            let cfg = load(&config, cli.seed)?;
            cfg.validate()?;
            println!("{}: ok", config.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

