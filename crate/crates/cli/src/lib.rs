//! Batch front end: JSON experiment configs in, CSV tables and optional SVG
//! charts out.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

use crate::commands::Experiment;
use crate::config::{Config, Overrides, Setup};
use crate::error::{CliError, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "postsel", version, about = "Exact and simulated distributions of post-model-selection estimators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed; overrides `mc.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Also write SVG charts.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact conditional c.d.f.s, selection probabilities and limits.
    Exact(Common),
    /// Monte Carlo sweeps along the sample-size ladder.
    Sweep {
        #[arg(long, value_enum)]
        experiment: Experiment,
        #[command(flatten)]
        common: Common,
    },
    /// Symmetric-difference frequencies of a non-nested selector.
    #[command(alias = "probe24")]
    Probe(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Exact(c) | Command::Probe(c) | Command::Sweep { common: c, .. } => c,
        }
    }
}

/// Loads and validates the config named by `common`.
pub fn load(common: &Common) -> Result<Setup> {
    let cfg = Config::load(&common.config)?;
    let base = common.config.parent().unwrap_or(Path::new("."));
    cfg.setup(base, &Overrides { seed: common.seed, out: common.out.clone(), svg: common.svg })
}

/// Runs a command and returns the files written.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let common = cli.command.common();
    let go = || -> Result<Vec<PathBuf>> {
        let setup = load(common)?;
        match &cli.command {
            Command::Exact(_) => commands::write_exact(&setup, &commands::exact_tables(&setup)?),
            Command::Sweep { experiment, .. } => {
                commands::write_sweep(&setup, *experiment, &commands::sweep_table(&setup, *experiment)?)
            }
            Command::Probe(_) => commands::write_symdiff(&setup, &commands::symdiff_table(&setup)?),
        }
    };
    match common.threads {
        Some(0) => Err(CliError::config("--threads", "must be positive")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::config("--threads", e))?
            .install(go),
        None => go(),
    }
}
