//! Run configuration: a flat TOML file, command defaults, and flag overrides.
//!
//! Precedence is flag > file > command default. Every key is optional and
//! unknown keys are rejected so typos surface as usage errors.

use std::path::{Path, PathBuf};

use cft_core::experiment::{ExperimentOptions, SyntheticTask};
use cft_core::objective::InstanceDims;
use cft_core::teacher::KernelSpec;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::Command;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// A scalar or a list in the config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Grid<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> Grid<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            Grid::One(v) => vec![v],
            Grid::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    Beta,
    UpdateFreq,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Beta => "beta",
            SweepAxis::UpdateFreq => "update_freq",
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seeds: Option<Grid<u64>>,
    pub lambda: Option<Grid<f64>>,
    pub beta: Option<Grid<f64>>,
    pub update_freq: Option<usize>,
    pub update_freq_grid: Option<Grid<usize>>,
    pub axes: Option<Vec<SweepAxis>>,
    pub tau: Option<f64>,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
    pub d_img: Option<usize>,
    pub d_txt: Option<usize>,
    pub p: Option<usize>,
    pub n: Option<usize>,
    pub gd_step: Option<f64>,
    pub gd_step_fraction: Option<f64>,
    pub gd_max_iters: Option<usize>,
    pub gd_tol: Option<f64>,
    pub horizon: Option<usize>,
    pub ema_rho: Option<f64>,
    pub core_dim: Option<usize>,
    pub spurious_dim: Option<usize>,
    pub n_classes: Option<usize>,
    pub n_colors: Option<usize>,
    pub spurious_corr: Option<f64>,
    pub n_train: Option<usize>,
    pub n_eval: Option<usize>,
    pub noise: Option<f64>,
    pub embed_dim: Option<usize>,
    pub dynamic_steps: Option<usize>,
    pub tracer_iters: Option<usize>,
    pub tracer_batch: Option<usize>,
    pub sd_curvature: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigRead {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| CliError::Config {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Values given on the command line.
#[derive(Debug, Default, Clone)]
pub struct FlagOverrides {
    pub seeds: Option<Vec<u64>>,
    pub lambda: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub update_freq: Option<usize>,
    pub tau: Option<f64>,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
}

/// How the verification suite steps gradient descent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GdStep {
    Absolute(f64),
    Fraction(f64),
}

/// Fully resolved parameters of one command.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub betas: Vec<f64>,
    pub update_freq: usize,
    pub update_freq_grid: Vec<usize>,
    pub axes: Vec<SweepAxis>,
    pub tau: f64,
    pub format: Format,
    pub out: Option<PathBuf>,
    pub dims: InstanceDims,
    pub gd_step: GdStep,
    pub gd_max_iters: usize,
    pub gd_tol: f64,
    pub horizon: usize,
    pub ema_rho: f64,
    pub task: SyntheticTask,
    pub experiment: ExperimentOptions,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl RunConfig {
    pub fn resolve(cmd: Command, file: FileConfig, flags: FlagOverrides) -> CliResult<Self> {
        let default_seeds: Vec<u64> = match cmd {
            Command::Toy => (0..10).collect(),
            Command::Sweep => (0..3).collect(),
            Command::Verify | Command::TeacherDynamics => vec![0],
        };
        let default_lambdas = match cmd {
            Command::Verify | Command::Sweep => vec![0.1, 1.0, 10.0],
            Command::Toy | Command::TeacherDynamics => vec![1.0],
        };
        let default_betas = match cmd {
            Command::Sweep => vec![0.2, 0.5, 1.0],
            _ => vec![0.5],
        };

        let seeds = flags
            .seeds
            .or(file.seeds.map(Grid::into_vec))
            .unwrap_or(default_seeds);
        let lambdas = flags
            .lambda
            .or(file.lambda.map(Grid::into_vec))
            .unwrap_or(default_lambdas);
        let betas = flags
            .beta
            .or(file.beta.map(Grid::into_vec))
            .unwrap_or(default_betas);
        let update_freq = flags.update_freq.or(file.update_freq).unwrap_or(1);
        let update_freq_grid = match (flags.update_freq, file.update_freq_grid) {
            (Some(f), _) => vec![f],
            (None, Some(g)) => g.into_vec(),
            (None, None) => vec![1, 2, 5],
        };
        let axes = file
            .axes
            .unwrap_or_else(|| vec![SweepAxis::Lambda, SweepAxis::Beta, SweepAxis::UpdateFreq]);
        let tau = flags.tau.or(file.tau).unwrap_or(1.0);
        let gd_step = match (file.gd_step, file.gd_step_fraction) {
            (Some(_), Some(_)) => {
                return Err(usage("set at most one of gd_step and gd_step_fraction"))
            }
            (Some(s), None) => GdStep::Absolute(s),
            (None, f) => GdStep::Fraction(f.unwrap_or(0.9)),
        };

        let defaults = SyntheticTask::default();
        let task = SyntheticTask {
            core_dim: file.core_dim.unwrap_or(defaults.core_dim),
            spurious_dim: file.spurious_dim.unwrap_or(defaults.spurious_dim),
            n_classes: file.n_classes.unwrap_or(defaults.n_classes),
            n_colors: file.n_colors.unwrap_or(defaults.n_colors),
            spurious_corr: file.spurious_corr.unwrap_or(defaults.spurious_corr),
            n_train: file.n_train.unwrap_or(defaults.n_train),
            n_eval: file.n_eval.unwrap_or(defaults.n_eval),
            noise: file.noise.unwrap_or(defaults.noise),
            embed_dim: file.embed_dim.unwrap_or(defaults.embed_dim),
            seed: 0,
        };
        let ema_rho = file.ema_rho.unwrap_or(0.99);
        let mut experiment = ExperimentOptions::default();
        experiment.dynamic_steps = file.dynamic_steps.unwrap_or(experiment.dynamic_steps);
        experiment.dynamic_update_every = update_freq;
        experiment.tracer.iters = file.tracer_iters.unwrap_or(experiment.tracer.iters);
        experiment.tracer.batch_size = file.tracer_batch.unwrap_or(experiment.tracer.batch_size);
        experiment.tracer.sd_curvature =
            file.sd_curvature.unwrap_or(experiment.tracer.sd_curvature);
        experiment.tracer.update_every = update_freq;
        experiment.tracer.distill.tau = tau;
        experiment.tracer.ema_rho = ema_rho;

        let cfg = RunConfig {
            seeds,
            lambdas,
            betas,
            update_freq,
            update_freq_grid,
            axes,
            tau,
            format: flags.format.or(file.format).unwrap_or(match cmd {
                Command::Verify => Format::Json,
                _ => Format::Csv,
            }),
            out: flags.out.or(file.out),
            dims: InstanceDims {
                d_img: file.d_img.unwrap_or(16),
                d_txt: file.d_txt.unwrap_or(8),
                p: file.p.unwrap_or(6),
                n: file.n.unwrap_or(8),
            },
            gd_step,
            gd_max_iters: file.gd_max_iters.unwrap_or(200_000),
            gd_tol: file.gd_tol.unwrap_or(1e-12),
            horizon: file.horizon.unwrap_or(500),
            ema_rho,
            task,
            experiment,
        };
        cfg.validate(cmd)?;
        Ok(cfg)
    }

    fn validate(&self, cmd: Command) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(usage("seed list is empty"));
        }
        if self.lambdas.is_empty() {
            return Err(usage("lambda grid is empty"));
        }
        if self.betas.is_empty() {
            return Err(usage("beta grid is empty"));
        }
        if cmd == Command::Sweep && self.axes.is_empty() {
            return Err(usage("no sweep axes selected"));
        }
        if cmd == Command::Sweep
            && self.axes.contains(&SweepAxis::UpdateFreq)
            && self.update_freq_grid.is_empty()
        {
            return Err(usage("update frequency grid is empty"));
        }
        if matches!(cmd, Command::Toy | Command::TeacherDynamics) {
            if self.lambdas.len() != 1 {
                return Err(usage(format!(
                    "{} takes a single --lambda value",
                    cmd.name()
                )));
            }
            if self.betas.len() != 1 {
                return Err(usage(format!("{} takes a single --beta value", cmd.name())));
            }
        }
        for &l in &self.lambdas {
            if !(l > 0.0 && l.is_finite()) {
                return Err(usage(format!("lambda {l} out of range")));
            }
        }
        for &b in &self.betas {
            KernelSpec::Beta { beta1: b, beta2: b }
                .validate()
                .map_err(|e| usage(e.to_string()))?;
        }
        if self.update_freq == 0 || self.update_freq_grid.contains(&0) {
            return Err(usage("update frequency must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(usage(format!("tau {} must be positive", self.tau)));
        }
        let step_ok = match self.gd_step {
            GdStep::Absolute(s) | GdStep::Fraction(s) => s > 0.0 && s.is_finite(),
        };
        if !step_ok {
            return Err(usage("gradient step must be positive"));
        }
        let d = self.dims;
        if d.d_img == 0 || d.d_txt == 0 || d.p == 0 || d.n < 2 {
            return Err(usage(format!(
                "instance dims {d:?} need positive sizes and n >= 2"
            )));
        }
        if self.horizon == 0 {
            return Err(usage("horizon must be at least 1"));
        }
        if !(self.ema_rho > 0.0 && self.ema_rho < 1.0) {
            return Err(usage(format!(
                "ema_rho {} must lie in (0, 1)",
                self.ema_rho
            )));
        }
        if self.gd_max_iters == 0 || self.gd_tol.is_nan() || self.gd_tol < 0.0 {
            return Err(usage(
                "gd_max_iters must be positive and gd_tol nonnegative",
            ));
        }
        self.task.validate().map_err(|e| usage(e.to_string()))?;
        let t = &self.experiment;
        if t.dynamic_steps == 0 || t.tracer.iters == 0 || t.tracer.batch_size == 0 {
            return Err(usage(
                "dynamic_steps, tracer_iters and tracer_batch must be positive",
            ));
        }
        if !(t.tracer.sd_curvature >= 0.0 && t.tracer.sd_curvature.is_finite()) {
            return Err(usage("sd_curvature must be nonnegative"));
        }
        Ok(())
    }

    /// Arcsine-family kernel `Beta(beta, beta)` for the first beta value.
    pub fn kernel(&self) -> KernelSpec {
        let b = self.betas[0];
        KernelSpec::Beta { beta1: b, beta2: b }
    }

    pub fn lambda(&self) -> f64 {
        self.lambdas[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let file: FileConfig = toml::from_str("seeds = [4, 5]\nlambda = 2.0\ntau = 0.5").unwrap();
        let flags = FlagOverrides {
            seeds: Some(vec![1]),
            ..FlagOverrides::default()
        };
        let cfg = RunConfig::resolve(Command::Verify, file, flags).unwrap();
        assert_eq!(cfg.seeds, [1]);
        assert_eq!(cfg.lambdas, [2.0]);
        assert_eq!(cfg.tau, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("lamda = 1.0").is_err());
    }

    #[test]
    fn command_defaults_differ() {
        let toy = RunConfig::resolve(
            Command::Toy,
            FileConfig::default(),
            FlagOverrides::default(),
        )
        .unwrap();
        assert_eq!(toy.seeds.len(), 10);
        let sweep = RunConfig::resolve(
            Command::Sweep,
            FileConfig::default(),
            FlagOverrides::default(),
        )
        .unwrap();
        assert_eq!(sweep.lambdas, [0.1, 1.0, 10.0]);
        assert_eq!(sweep.betas, [0.2, 0.5, 1.0]);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let cases = [
            "lambda = []",
            "beta = -1.0",
            "tau = 0.0",
            "update_freq = 0",
            "ema_rho = 1.0",
            "gd_step = 0.1\ngd_step_fraction = 0.5",
            "n = 1",
        ];
        for text in cases {
            let file: FileConfig = toml::from_str(text).unwrap();
            let err =
                RunConfig::resolve(Command::Sweep, file, FlagOverrides::default()).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}");
        }
        let many = FlagOverrides {
            lambda: Some(vec![1.0, 2.0]),
            ..FlagOverrides::default()
        };
        let err = RunConfig::resolve(Command::Toy, FileConfig::default(), many).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
