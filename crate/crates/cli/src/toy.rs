//! All six strategies on the synthetic spurious-correlation task.

use std::path::PathBuf;

use cft_core::experiment::{
    dominates, ordering_report, run_seed, summarize, OrderingReport, Strategy, StrategyConfig,
    StrategyRun, StrategySummary,
};
use cft_core::teacher::KernelSpec;
use serde::Serialize;

use crate::config::{Format, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{csv_bytes, emit, json_bytes, num, opt, Table};
use crate::Outcome;

pub const CSV_HEADER: &[&str] = &[
    "seed",
    "strategy",
    "lambda",
    "kernel",
    "acc_original",
    "acc_new",
    "forgetting",
    "teacher_gap",
    "ema_gap",
];

#[derive(Debug, Clone, Serialize)]
pub struct ToyRow {
    pub seed: u64,
    pub strategy: &'static str,
    pub lambda: Option<f64>,
    pub kernel: Option<String>,
    pub acc_original: f64,
    pub acc_new: f64,
    pub forgetting: f64,
    pub teacher_gap: Option<f64>,
    pub ema_gap: Option<f64>,
}

impl ToyRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.strategy.to_string(),
            opt(self.lambda),
            self.kernel.clone().unwrap_or_default(),
            num(self.acc_original),
            num(self.acc_new),
            num(self.forgetting),
            opt(self.teacher_gap),
            opt(self.ema_gap),
        ]
    }
}

/// Seed-averaged metrics of one strategy with its Pareto status.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub strategy: &'static str,
    pub mean_acc_original: f64,
    pub mean_acc_new: f64,
    pub mean_forgetting: f64,
    pub seeds: usize,
    pub pareto_optimal: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Ordering {
    #[serde(flatten)]
    pub report: OrderingReport,
    /// Strategies from most to least forgetting.
    pub forgetting_order: Vec<&'static str>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ToySummary {
    pub strategies: Vec<SummaryRow>,
    pub ordering: Ordering,
}

#[derive(Debug, Clone, Serialize)]
pub struct ToyOutput {
    pub rows: Vec<ToyRow>,
    pub summary: ToySummary,
}

pub fn kernel_label(kernel: &KernelSpec) -> String {
    match kernel {
        KernelSpec::Beta { beta1, beta2 } => format!("beta({beta1},{beta2})"),
        KernelSpec::Uniform => "uniform".into(),
        KernelSpec::EmaEquivalent { rho, .. } => format!("ema({rho})"),
        KernelSpec::LastIterate => "last".into(),
    }
}

pub fn strategy_configs(cfg: &RunConfig) -> Vec<StrategyConfig> {
    Strategy::ALL
        .iter()
        .map(|&s| {
            StrategyConfig::new(s)
                .with_lambda(cfg.lambda())
                .with_kernel(cfg.kernel())
        })
        .collect()
}

fn summary_of(runs: &[StrategyRun]) -> CliResult<ToySummary> {
    let means: Vec<StrategySummary> = summarize(runs);
    let points: Vec<(f64, f64)> = means
        .iter()
        .map(|m| (m.mean_acc_original, m.mean_acc_new))
        .collect();
    let strategies = means
        .iter()
        .enumerate()
        .map(|(i, m)| SummaryRow {
            strategy: m.strategy.name(),
            mean_acc_original: m.mean_acc_original,
            mean_acc_new: m.mean_acc_new,
            mean_forgetting: m.mean_forgetting,
            seeds: m.seeds,
            pareto_optimal: !points
                .iter()
                .enumerate()
                .any(|(j, &q)| j != i && dominates(q, points[i])),
        })
        .collect();
    let report = ordering_report(&means)
        .ok_or_else(|| CliError::Usage("summary needs every finetuning strategy".into()))?;
    let mut order: Vec<&StrategySummary> = means.iter().collect();
    order.sort_by(|a, b| b.mean_forgetting.total_cmp(&a.mean_forgetting));
    Ok(ToySummary {
        strategies,
        ordering: Ordering {
            report,
            forgetting_order: order.iter().map(|m| m.strategy.name()).collect(),
        },
    })
}

pub fn toy_output(cfg: &RunConfig) -> CliResult<ToyOutput> {
    let configs = strategy_configs(cfg);
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let seed_runs = run_seed(&cfg.task.with_seed(seed), &configs, &cfg.experiment)?;
        for r in &seed_runs {
            rows.push(ToyRow {
                seed,
                strategy: r.config.strategy.name(),
                lambda: r.config.lambda,
                kernel: r.config.kernel.as_ref().map(kernel_label),
                acc_original: r.metrics.acc_original,
                acc_new: r.metrics.acc_new,
                forgetting: r.metrics.forgetting,
                teacher_gap: r.metrics.teacher_gap,
                ema_gap: r.metrics.ema_gap,
            });
        }
        runs.extend(seed_runs);
    }
    Ok(ToyOutput {
        rows,
        summary: summary_of(&runs)?,
    })
}

/// `<out>.summary.json` next to the CSV file.
pub fn summary_path(out: &std::path::Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".summary.json");
    PathBuf::from(name)
}

pub fn cmd_toy(cfg: &RunConfig) -> CliResult<Outcome> {
    let output = toy_output(cfg)?;
    match cfg.format {
        Format::Json => emit(cfg.out.as_deref(), &json_bytes(&output)?)?,
        Format::Csv => {
            let table = Table {
                header: CSV_HEADER,
                rows: output.rows.iter().map(ToyRow::cells).collect(),
            };
            emit(cfg.out.as_deref(), &csv_bytes(&table)?)?;
            let summary = json_bytes(&output.summary)?;
            match &cfg.out {
                Some(out) => emit(Some(&summary_path(out)), &summary)?,
                None => eprint!("{}", String::from_utf8_lossy(&summary)),
            }
        }
    }
    Ok(Outcome::default())
}
