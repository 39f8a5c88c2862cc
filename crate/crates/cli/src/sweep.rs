//! One-axis sweeps on the synthetic task.
//!
//! The lambda axis runs static self-distillation and reports how far the
//! encoder moved inside the task subspace. The Beta and update-frequency axes
//! run dynamic self-distillation and report how much of the pretrained
//! encoder the teacher retains. Axes that do not vary a parameter use
//! `lambda = 1` and `Beta(0.5, 0.5)` unless a single value was given.

use cft_core::experiment::{
    generate_tasks, pretrain_linear, run_strategy, RunMetrics, Strategy, StrategyConfig, TaskData,
};
use cft_core::teacher::KernelSpec;
use cft_core::Mat;
use serde::Serialize;

use crate::config::{Format, RunConfig, SweepAxis};
use crate::error::CliResult;
use crate::output::{csv_bytes, emit, json_bytes, num, opt, Table};
use crate::Outcome;

pub const CSV_HEADER: &[&str] = &[
    "axis",
    "value",
    "seed",
    "strategy",
    "lambda",
    "beta",
    "update_every",
    "acc_original",
    "acc_new",
    "forgetting",
    "task_shift",
    "omega0",
];

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: f64,
    pub seed: u64,
    pub strategy: &'static str,
    pub lambda: f64,
    pub beta: Option<f64>,
    pub update_every: Option<usize>,
    pub acc_original: f64,
    pub acc_new: f64,
    pub forgetting: f64,
    /// `||(W - W0) P||` on the finetuning subspace.
    pub task_shift: f64,
    /// Share of the pretrained encoder left in the final teacher.
    pub omega0: Option<f64>,
}

impl SweepRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.axis.to_string(),
            num(self.value),
            self.seed.to_string(),
            self.strategy.to_string(),
            num(self.lambda),
            opt(self.beta),
            self.update_every.map(|f| f.to_string()).unwrap_or_default(),
            num(self.acc_original),
            num(self.acc_new),
            num(self.forgetting),
            num(self.task_shift),
            opt(self.omega0),
        ]
    }
}

/// Coefficient of the dynamic runs on the kernel and frequency axes.
pub fn dynamic_lambda(cfg: &RunConfig) -> f64 {
    if cfg.lambdas.len() == 1 {
        cfg.lambdas[0]
    } else {
        1.0
    }
}

/// Kernel of the dynamic runs on the frequency axis.
pub fn dynamic_kernel(cfg: &RunConfig) -> KernelSpec {
    if cfg.betas.len() == 1 {
        cfg.kernel()
    } else {
        KernelSpec::arcsine()
    }
}

struct SeedContext {
    seed: u64,
    tasks: TaskData,
    pre: Mat,
    p_task: Mat,
}

impl SeedContext {
    fn row(
        &self,
        axis: SweepAxis,
        value: f64,
        sc: &StrategyConfig,
        m: &RunMetrics,
        update_every: Option<usize>,
    ) -> SweepRow {
        let beta = match sc.kernel {
            Some(KernelSpec::Beta { beta1, .. }) => Some(beta1),
            _ => None,
        };
        SweepRow {
            axis: axis.name(),
            value,
            seed: self.seed,
            strategy: sc.strategy.name(),
            lambda: sc.lambda.unwrap_or(0.0),
            beta,
            update_every,
            acc_original: m.acc_original,
            acc_new: m.acc_new,
            forgetting: m.forgetting,
            task_shift: (&(&m.weights - &self.pre) * &self.p_task).frobenius_norm(),
            omega0: m
                .trajectory
                .as_ref()
                .map(|t| t.final_record().initial_weight),
        }
    }
}

pub fn sweep_rows(cfg: &RunConfig) -> CliResult<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let tasks = generate_tasks(&cfg.task.with_seed(seed))?;
        let pre = pretrain_linear(&tasks)?;
        let p_task = tasks.target_problem(&tasks.finetune)?.p_i().clone();
        let ctx = SeedContext {
            seed,
            tasks,
            pre,
            p_task,
        };
        for &axis in &cfg.axes {
            match axis {
                SweepAxis::Lambda => {
                    for &l in &cfg.lambdas {
                        let sc = StrategyConfig::new(Strategy::StaticSD).with_lambda(l);
                        let m = run_strategy(&sc, &ctx.tasks, &ctx.pre, &cfg.experiment)?;
                        rows.push(ctx.row(axis, l, &sc, &m, None));
                    }
                }
                SweepAxis::Beta => {
                    for &b in &cfg.betas {
                        let sc = StrategyConfig::new(Strategy::DynamicSD)
                            .with_lambda(dynamic_lambda(cfg))
                            .with_kernel(KernelSpec::Beta { beta1: b, beta2: b });
                        let m = run_strategy(&sc, &ctx.tasks, &ctx.pre, &cfg.experiment)?;
                        let f = cfg.experiment.dynamic_update_every;
                        rows.push(ctx.row(axis, b, &sc, &m, Some(f)));
                    }
                }
                SweepAxis::UpdateFreq => {
                    for &f in &cfg.update_freq_grid {
                        let sc = StrategyConfig::new(Strategy::DynamicSD)
                            .with_lambda(dynamic_lambda(cfg))
                            .with_kernel(dynamic_kernel(cfg));
                        let mut opts = cfg.experiment;
                        opts.dynamic_update_every = f;
                        let m = run_strategy(&sc, &ctx.tasks, &ctx.pre, &opts)?;
                        rows.push(ctx.row(axis, f as f64, &sc, &m, Some(f)));
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn cmd_sweep(cfg: &RunConfig) -> CliResult<Outcome> {
    let rows = sweep_rows(cfg)?;
    let bytes = match cfg.format {
        Format::Json => json_bytes(&rows)?,
        Format::Csv => csv_bytes(&Table {
            header: CSV_HEADER,
            rows: rows.iter().map(SweepRow::cells).collect(),
        })?,
    };
    emit(cfg.out.as_deref(), &bytes)?;
    Ok(Outcome::default())
}
