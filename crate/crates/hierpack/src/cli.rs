//! Command-line parsing and dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands;
use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "hierpack", version, about = "Hierarchical temporal-graph models with task-prototype transfer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed override; wins over the file and `--set`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory for data, checkpoints and outputs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override one key, e.g. `--set backbone.L=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Stage 1: multi-task pretraining on the support tasks.
    Pretrain,
    /// Build frozen prototype sets from the pretrained model.
    BuildBackpack,
    /// Stage 2: learn the novel task with the backpack.
    TrainNovel,
    /// Evaluate a checkpoint.
    Evaluate,
    /// Export the activation-consensus matrix.
    Consensus,
    /// Finite-difference gradient verification.
    GradCheck,
}

impl Cli {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(out) = &self.out {
            let abs = std::path::absolute(out).map_err(|e| Error::io(out, e))?;
            overrides.push(format!("paths.root={}", abs.display()));
        }
        overrides.extend(self.set.iter().cloned());
        RunConfig::load(self.config.as_deref(), &overrides, self.seed)
    }
}

pub fn dispatch(command: Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData => commands::gen_data(cfg, out),
        Command::Pretrain => commands::pretrain(cfg, out),
        Command::BuildBackpack => commands::build_backpack(cfg, out),
        Command::TrainNovel => commands::train_novel(cfg, out),
        Command::Evaluate => commands::run_evaluate(cfg, out),
        Command::Consensus => commands::run_consensus(cfg, out),
        Command::GradCheck => commands::grad_check(cfg, out),
    }
}

/// Runs one invocation and returns its exit code. Failures print a single
/// tab-separated `error` line to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match cli.resolve().and_then(|cfg| dispatch(cli.command, &cfg, out)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", e.line());
            e.exit_code()
        }
    }
}
