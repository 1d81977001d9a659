//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{self, Experiment};
use crate::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "vaelab", version, about = "Train and diagnose text VAEs from a TOML experiment file")]
pub struct Cli {
    /// Experiment configuration.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Parallel workers over grid cells.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Added to every configured seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed_offset: u64,
    /// Skip cells that already have a valid checkpoint.
    #[arg(long, global = true)]
    pub resume: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic corpus as TSV files.
    Synth,
    /// Train every cell of the grid.
    Train,
    /// Loss profiles, memorization, argmax positions and IWAE perplexity.
    Diagnose,
    /// Decode the test split with every trained VAE.
    Decode,
    /// Semi-supervised probes on sampled latent features.
    Ssl,
    /// Bag-of-words label agreement of reconstructions.
    Agreement,
    /// Summarize existing results.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// train, diagnose, decode, ssl and agreement in order.
    All,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let Some(path) = &cli.config else {
        anyhow::bail!("--config is required");
    };
    let cfg = ExperimentConfig::load(path)?.with_seed_offset(cli.seed_offset);
    if let Command::Report { out } = &cli.command {
        cfg.validate()?;
        let text = commands::report(&cfg, out.as_deref())?;
        if out.is_none() {
            print!("{text}");
        }
        return Ok(());
    }
    let exp = Experiment::open(cfg, cli.workers, cli.resume)?;
    eprintln!("run directory {}", exp.dir.display());
    match cli.command {
        Command::Synth => {
            let dir = commands::synth(&exp)?;
            eprintln!("wrote {}", dir.display());
        }
        Command::Train => commands::train(&exp)?,
        Command::Diagnose => commands::diagnose(&exp)?,
        Command::Decode => commands::decode(&exp)?,
        Command::Ssl => commands::ssl(&exp)?,
        Command::Agreement => commands::agreement(&exp)?,
        Command::All => {
            commands::train(&exp)?;
            commands::diagnose(&exp)?;
            commands::decode(&exp)?;
            commands::ssl(&exp)?;
            commands::agreement(&exp)?;
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}
