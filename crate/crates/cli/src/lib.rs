//! Command-line harness around `cft-core`.
//!
//! Four subcommands share one flat configuration:
//!
//! * `verify` checks the closed forms, teacher recursions and gradients on
//!   seeded random instances and fails with exit code 1 if any check fails.
//! * `sweep` varies lambda, the Beta kernel shape, or the teacher update
//!   frequency on the synthetic task.
//! * `toy` runs all six finetuning strategies per seed and summarizes the
//!   trade-off between the original and the new task.
//! * `teacher-dynamics` follows matched EMA and weight-averaged teachers along
//!   one dynamic self-distillation trajectory.
//!
//! Output is CSV (header row, LF endings, 12 significant digits) or JSON.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod config;
pub mod dynamics;
pub mod error;
pub mod output;
pub mod sweep;
pub mod toy;
pub mod verify;

pub use config::{FileConfig, FlagOverrides, Format, RunConfig};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "cft",
    version,
    about = "Linearized contrastive finetuning experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Flat TOML file with default parameters.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output file; standard output when absent.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,

    /// Comma-separated seeds.
    #[arg(long, global = true, value_delimiter = ',', value_name = "LIST")]
    pub seeds: Option<Vec<u64>>,

    /// Comma-separated regularization strengths.
    #[arg(long, global = true, value_delimiter = ',', value_name = "GRID")]
    pub lambda: Option<Vec<f64>>,

    /// Comma-separated shapes of the symmetric Beta teacher kernel.
    #[arg(long, global = true, value_delimiter = ',', value_name = "GRID")]
    pub beta: Option<Vec<f64>>,

    /// Teacher absorbs the student every N steps.
    #[arg(long, global = true, value_name = "N")]
    pub update_freq: Option<usize>,

    /// Distillation temperature.
    #[arg(long, global = true, value_name = "REAL")]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Check the solvers and identities on random instances.
    Verify,
    /// Sweep lambda, kernel shape and update frequency on the synthetic task.
    Sweep,
    /// Compare all finetuning strategies on the synthetic task.
    Toy,
    /// Per-step gaps of EMA and weight-averaged teachers.
    TeacherDynamics,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Sweep => "sweep",
            Command::Toy => "toy",
            Command::TeacherDynamics => "teacher-dynamics",
        }
    }
}

/// Names of failed checks; empty on success.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Outcome {
    pub failures: Vec<String>,
}

impl Cli {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let file = match &self.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let flags = FlagOverrides {
            seeds: self.seeds.clone(),
            lambda: self.lambda.clone(),
            beta: self.beta.clone(),
            update_freq: self.update_freq,
            tau: self.tau,
            format: self.format,
            out: self.out.clone(),
        };
        RunConfig::resolve(self.command, file, flags)
    }
}

pub fn run(cli: &Cli) -> CliResult<Outcome> {
    let cfg = cli.resolve()?;
    match cli.command {
        Command::Verify => verify::cmd_verify(&cfg),
        Command::Sweep => sweep::cmd_sweep(&cfg),
        Command::Toy => toy::cmd_toy(&cfg),
        Command::TeacherDynamics => dynamics::cmd_teacher_dynamics(&cfg),
    }
}
