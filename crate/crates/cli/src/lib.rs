//! `finforge` command-line pipeline.
//!
//! Exit codes: 0 success, 1 validation failure, 2 input error, 3 evaluator
//! error, 4 state error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod table;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    Validation(String),
    Input(String),
    Evaluator(String),
    State(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Input(_) => 2,
            Failure::Evaluator(_) => 3,
            Failure::State(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Input(m) | Failure::Evaluator(m) | Failure::State(m) => m,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

#[derive(Debug, Parser)]
#[command(name = "finforge", version, about = "Label-guided training-data curation pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Pipeline config file (TOML).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, env = "FINFORGE_SEED")]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads; overrides the config value.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label catalog checks.
    Labels {
        #[command(subcommand)]
        action: LabelsCommand,
    },
    /// Run the knowledge-guided and evolution synthesis tracks.
    Synthesize,
    /// Score records for consistency, reasoning validity and quality.
    Verify {
        /// Corpus to verify instead of the configured one.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Response sets instead of the configured file.
        #[arg(long)]
        responses: Option<PathBuf>,
    },
    /// Dedup, detox, decontaminate and apply the final quality gate.
    Govern {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Overrides the global quality threshold.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Estimate per-label difficulty weights.
    Weights {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Simulation scenario instead of the configured one.
        #[arg(long)]
        sim: Option<PathBuf>,
        /// Previous epoch's weight table.
        #[arg(long)]
        previous: Option<PathBuf>,
    },
    /// Attribution loop.
    Loop {
        #[command(subcommand)]
        action: LoopCommand,
    },
    /// Summarize the reports found in the output directory.
    Report,
}

#[derive(Debug, Subcommand)]
pub enum LabelsCommand {
    /// Check every record label against the catalog.
    Validate {
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Record files; repeatable.
        #[arg(long)]
        corpus: Vec<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum LoopCommand {
    Run(LoopRunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct LoopRunArgs {
    /// Simulation scenario instead of the configured one.
    #[arg(long)]
    pub sim: Option<PathBuf>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Pause after this many completed iterations, leaving a checkpoint.
    #[arg(long)]
    pub halt_after: Option<usize>,
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    commands::dispatch(&cli.global, cli.command)
}
