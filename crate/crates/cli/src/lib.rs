//! Command-line front end: experiment configuration, model construction,
//! CSV/JSON output and the simulate, filter, reference and benchmark commands.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod setup;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "nenkf", version, about = "Sequential Bayesian parameter inference for state-space models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// TOML experiment configuration (all sections optional).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides `run.seed` (or `data.seed` for simulate, `reference.seed` for reference).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset from the configured model.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the configured algorithm once on a dataset.
    Filter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Long MCMC run on an oracle likelihood.
    Reference {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Replicated runs scored against a reference.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        replicates: Option<usize>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if common.threads.is_some() {
        cfg.run.threads = common.threads;
    }
    Ok(cfg)
}

/// Executes a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { common } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            commands::simulate(&cfg, &common.out)?;
        }
        Command::Filter { common, data } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.run.seed = s;
            }
            commands::filter(&cfg, &data, &common.out)?;
        }
        Command::Reference { common, data } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.reference.seed = s;
            }
            commands::reference(&cfg, &data, &common.out)?;
        }
        Command::Benchmark {
            common,
            data,
            reference,
            replicates,
        } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.run.seed = s;
            }
            if let Some(r) = replicates {
                cfg.run.replicates = r;
            }
            commands::benchmark(&cfg, &data, &reference, &common.out)?;
        }
    }
    Ok(())
}
