//! Matched EMA and weight-averaged teachers on one student trajectory.
//!
//! The student follows exact dynamic self-distillation against the averaged
//! teacher. A passive EMA teacher absorbs the same iterates on the same
//! steps, so the two gap columns differ only in how the average is weighted.

use cft_core::experiment::{generate_tasks, pretrain_linear};
use cft_core::teacher::{ema_update, run_sdwma_with, SdwmaConfig, TimeGrid};
use serde::Serialize;

use crate::config::{Format, RunConfig};
use crate::error::CliResult;
use crate::output::{csv_bytes, emit, json_bytes, num, Table};
use crate::Outcome;

pub const CSV_HEADER: &[&str] = &[
    "seed",
    "step",
    "omega",
    "contraction_factor",
    "initial_weight",
    "wma_gap",
    "ema_gap",
    "persistence_bound",
    "teacher_error",
    "student_error",
];

#[derive(Debug, Clone, Serialize)]
pub struct DynamicsRow {
    pub seed: u64,
    pub step: usize,
    /// Weight of this step's teacher update; 0 when the teacher was held.
    pub omega: f64,
    /// `1 - omega/(1+lambda)`.
    pub contraction_factor: f64,
    /// `omega_{0|t}`.
    pub initial_weight: f64,
    pub wma_gap: f64,
    pub ema_gap: f64,
    /// `omega_{0|t} ||W_t - W0||`.
    pub persistence_bound: f64,
    /// `||(teacher - W*) P||`.
    pub teacher_error: f64,
    /// `||(student - W*) P||`.
    pub student_error: f64,
}

impl DynamicsRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.step.to_string(),
            num(self.omega),
            num(self.contraction_factor),
            num(self.initial_weight),
            num(self.wma_gap),
            num(self.ema_gap),
            num(self.persistence_bound),
            num(self.teacher_error),
            num(self.student_error),
        ]
    }
}

pub fn dynamics_rows(cfg: &RunConfig) -> CliResult<Vec<DynamicsRow>> {
    let lambda = cfg.lambda();
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let tasks = generate_tasks(&cfg.task.with_seed(seed))?;
        let pre = pretrain_linear(&tasks)?;
        let prob = tasks.target_problem(&tasks.finetune)?;
        let traj = run_sdwma_with(
            &prob,
            &pre,
            &SdwmaConfig {
                lambda,
                kernel: cfg.kernel(),
                grid: TimeGrid::with_default_offsets(cfg.horizon)?,
                update_every: cfg.update_freq,
            },
        )?;
        let mut ema = pre.clone();
        for r in &traj.records {
            if r.step > 0 && r.step % cfg.update_freq == 0 {
                ema = ema_update(&ema, &r.w_student, cfg.ema_rho)?;
            }
            rows.push(DynamicsRow {
                seed,
                step: r.step,
                omega: r.omega,
                contraction_factor: 1.0 - r.omega / (1.0 + lambda),
                initial_weight: r.initial_weight,
                wma_gap: r.gap_teacher_student,
                ema_gap: (&ema - &r.w_student).frobenius_norm(),
                persistence_bound: r.initial_weight * (&r.w_student - &pre).frobenius_norm(),
                teacher_error: r.err_teacher,
                student_error: r.err_student,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_teacher_dynamics(cfg: &RunConfig) -> CliResult<Outcome> {
    let rows = dynamics_rows(cfg)?;
    let bytes = match cfg.format {
        Format::Json => json_bytes(&rows)?,
        Format::Csv => csv_bytes(&Table {
            header: CSV_HEADER,
            rows: rows.iter().map(DynamicsRow::cells).collect(),
        })?,
    };
    emit(cfg.out.as_deref(), &bytes)?;
    Ok(Outcome::default())
}
