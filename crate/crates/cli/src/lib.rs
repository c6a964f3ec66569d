//! Command-line pipeline for the quantized-training engine: compile,
//! profile, search, train, report.

pub mod commands;
pub mod config;
pub mod dataset;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use tinytrain_core::error::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tinytrain", version, about = "int8 on-device training pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the forward graph, derive backward, apply scheme pruning and
    /// slicing, and emit graph.json.
    Compile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scheme: Option<PathBuf>,
    },
    /// Analytic and simulated memory report (memory.csv, memory.json).
    Profile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scheme: Option<PathBuf>,
    },
    /// Contribution analysis plus evolutionary scheme search under a byte
    /// budget (scheme.json, table.json, history.csv).
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        budget_bytes: Option<u64>,
    },
    /// Train under a scheme (checkpoint, metrics.jsonl, ratios.csv).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scheme: Option<PathBuf>,
    },
    /// Aggregate run directories into plot-ready CSVs (frontier.csv,
    /// residency.csv, ratios.csv).
    Report {
        /// Run directories produced by train/profile.
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Compile { config, out, seed, scheme } => {
            let loaded = config::load_config(&config, seed)?;
            Ok(commands::cmd_compile(&loaded, &out, scheme.as_deref())?.message)
        }
        Command::Profile { config, out, seed, scheme } => {
            let loaded = config::load_config(&config, seed)?;
            Ok(commands::cmd_profile(&loaded, &out, scheme.as_deref())?.message)
        }
        Command::Search { config, out, seed, budget_bytes } => {
            let loaded = config::load_config(&config, seed)?;
            Ok(commands::cmd_search(&loaded, &out, budget_bytes)?.message)
        }
        Command::Train { config, out, seed, scheme } => {
            let loaded = config::load_config(&config, seed)?;
            Ok(commands::cmd_train(&loaded, &out, scheme.as_deref())?.message)
        }
        Command::Report { runs, out } => Ok(commands::cmd_report(&runs, &out)?.message),
    }
}

/// Exit codes: 0 success, 2 config error, 3 infeasible search, 4 numeric
/// failure, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Scheme(_) => 2,
        Error::Infeasible(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}
