//! Synthetic spurious-correlation benchmark for the linear model.
//!
//! Images are `[core ; spurious]` feature vectors. The core block carries a
//! noisy class signal. The spurious block is one of a few "color" patterns:
//! uninformative on the original task, and aligned with the label's color
//! group with probability `spurious_corr` on the finetuning task. Text inputs
//! are one-hot class prototypes behind a frozen encoder with orthonormal
//! columns, and classification is zero-shot by embedding similarity.
//!
//! Strategies are scored by accuracy on both tasks and by forgetting, the
//! absolute drop in original-task accuracy relative to the pretrained model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::closed_form::{solve_direct_ft, solve_l2sp, solve_static_sd};
use crate::distill::{composite_sd_grad, DistillConfig, EmbeddingBatch};
use crate::error::{Error, Result};
use crate::matcore::{lambda_max_sym, Mat};
use crate::objective::{contrastive_target, FinetuneInstance, TargetProblem};
use crate::teacher::{
    ema_update, run_sdwma_with, wma_update_at, KernelSpec, SdwmaConfig, SdwmaTrajectory,
    TeacherState, TimeGrid,
};

/// Generator settings for one pretrain/finetune task pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub core_dim: usize,
    pub spurious_dim: usize,
    pub n_classes: usize,
    /// Number of spurious patterns; classes are split evenly into this many groups.
    pub n_colors: usize,
    /// Probability that a finetuning sample shows its class group's pattern.
    pub spurious_corr: f64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Standard deviation of the Gaussian noise on the core block.
    pub noise: f64,
    /// Width of the shared embedding space.
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            core_dim: 16,
            spurious_dim: 8,
            n_classes: 4,
            n_colors: 2,
            spurious_corr: 0.95,
            n_train: 512,
            n_eval: 2048,
            noise: 0.3,
            embed_dim: 8,
            seed: 0,
        }
    }
}

impl SyntheticTask {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.core_dim + self.spurious_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = |detail: String| Error::InvalidDimensions {
            what: "synthetic task",
            detail,
        };
        if self.n_classes < 2 {
            return Err(dims(format!("n_classes = {} < 2", self.n_classes)));
        }
        if self.core_dim < self.n_classes {
            return Err(dims(format!(
                "core_dim = {} smaller than n_classes = {}",
                self.core_dim, self.n_classes
            )));
        }
        if self.n_colors == 0 || self.n_colors > self.n_classes {
            return Err(dims(format!(
                "n_colors = {} must lie in 1..={}",
                self.n_colors, self.n_classes
            )));
        }
        if self.spurious_dim < self.n_colors {
            return Err(dims(format!(
                "spurious_dim = {} smaller than n_colors = {}",
                self.spurious_dim, self.n_colors
            )));
        }
        if self.embed_dim < self.n_classes {
            return Err(dims(format!(
                "embed_dim = {} smaller than n_classes = {}",
                self.embed_dim, self.n_classes
            )));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(dims("sample counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.spurious_corr) {
            return Err(Error::InvalidParameter {
                name: "spurious_corr",
                value: self.spurious_corr,
                reason: "must lie in [0, 1]",
            });
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "noise",
                value: self.noise,
                reason: "must be nonnegative",
            });
        }
        Ok(())
    }

    /// Color group of a class: classes are cut into `n_colors` contiguous runs.
    pub fn color_group(&self, class: usize) -> usize {
        class * self.n_colors / self.n_classes
    }

    /// Unit-norm class signal: a one-hot-ish block of the core features.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        block_pattern(self.core_dim, self.n_classes, class)
    }

    pub fn color_pattern(&self, color: usize) -> Vec<f64> {
        block_pattern(self.spurious_dim, self.n_colors, color)
    }
}

/// Vector of length `len` with `1/sqrt(b)` on block `index` of `blocks` equal blocks.
fn block_pattern(len: usize, blocks: usize, index: usize) -> Vec<f64> {
    let b = len / blocks;
    let v = 1.0 / (b as f64).sqrt();
    (0..len)
        .map(|i| {
            if i / b == index && i < b * blocks {
                v
            } else {
                0.0
            }
        })
        .collect()
}

/// Images as columns plus their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    x: Mat,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(x: Mat, labels: Vec<usize>) -> Result<Self> {
        if x.cols() != labels.len() {
            return Err(Error::InvalidDimensions {
                what: "labeled set",
                detail: format!("{} columns but {} labels", x.cols(), labels.len()),
            });
        }
        Ok(LabeledSet { x, labels })
    }

    pub fn x(&self) -> &Mat {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Columns `range` as a new set.
    pub fn slice(&self, range: std::ops::Range<usize>) -> LabeledSet {
        let cols: Vec<usize> = range.collect();
        LabeledSet {
            x: self.x.select_columns(&cols),
            labels: cols.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Everything a strategy run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: SyntheticTask,
    pub pretrain: LabeledSet,
    pub finetune: LabeledSet,
    pub eval_original: LabeledSet,
    pub eval_new: LabeledSet,
    /// Frozen text encoder, `embed_dim x n_classes`, orthonormal columns.
    pub w_txt: Mat,
    /// Class prototypes as columns (the identity).
    pub prototypes: Mat,
}

impl TaskData {
    /// Text inputs paired with a set: the prototype of each label.
    pub fn text_inputs(&self, set: &LabeledSet) -> Mat {
        self.prototypes.select_columns(set.labels())
    }

    /// Least-squares problem of a set with the per-sample contrastive target `Y / n`.
    pub fn target_problem(&self, set: &LabeledSet) -> Result<TargetProblem> {
        if set.is_empty() {
            return Err(Error::EmptyEvalSet);
        }
        let inst = FinetuneInstance::new(
            set.x().clone(),
            self.text_inputs(set),
            Mat::zeros(self.w_txt.rows(), set.x().rows()),
            self.w_txt.clone(),
            0.0,
        )?;
        let y = contrastive_target(&inst).scale(1.0 / set.len() as f64);
        TargetProblem::from_target(set.x().clone(), y)
    }
}

enum SpuriousMode {
    Uninformative,
    Aligned(f64),
}

fn sample_set(
    spec: &SyntheticTask,
    n: usize,
    mode: SpuriousMode,
    rng: &mut ChaCha8Rng,
) -> LabeledSet {
    let k = spec.n_classes;
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    let means: Vec<Vec<f64>> = (0..k).map(|c| spec.class_mean(c)).collect();
    let colors: Vec<Vec<f64>> = (0..spec.n_colors).map(|c| spec.color_pattern(c)).collect();
    let d = spec.feature_dim();
    let mut x = Mat::zeros(d, n);
    for (j, &y) in labels.iter().enumerate() {
        for (i, &m) in means[y].iter().enumerate() {
            let z: f64 = StandardNormal.sample(&mut *rng);
            x.set(i, j, m + spec.noise * z);
        }
        let color = match mode {
            SpuriousMode::Uninformative => rng.random_range(0..spec.n_colors),
            SpuriousMode::Aligned(corr) => {
                let own = spec.color_group(y);
                if spec.n_colors == 1 || rng.random::<f64>() < corr {
                    own
                } else {
                    (own + rng.random_range(1..spec.n_colors)) % spec.n_colors
                }
            }
        };
        for (i, &v) in colors[color].iter().enumerate() {
            x.set(spec.core_dim + i, j, v);
        }
    }
    LabeledSet { x, labels }
}

/// Draws the four datasets and the text encoder from `spec.seed`.
pub fn generate_tasks(spec: &SyntheticTask) -> Result<TaskData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = Mat::from_fn(spec.embed_dim, spec.n_classes, |_, _| {
        StandardNormal.sample(&mut rng)
    });
    let w_txt = Mat::from_inner(gauss.into_inner().qr().q())?;
    let pretrain = sample_set(spec, spec.n_train, SpuriousMode::Uninformative, &mut rng);
    let finetune = sample_set(
        spec,
        spec.n_train,
        SpuriousMode::Aligned(spec.spurious_corr),
        &mut rng,
    );
    let eval_original = sample_set(spec, spec.n_eval, SpuriousMode::Uninformative, &mut rng);
    let eval_new = sample_set(
        spec,
        spec.n_eval,
        SpuriousMode::Aligned(spec.spurious_corr),
        &mut rng,
    );
    Ok(TaskData {
        spec: *spec,
        pretrain,
        finetune,
        eval_original,
        eval_new,
        w_txt,
        prototypes: Mat::identity(spec.n_classes),
    })
}

/// Class of one image: argmax of `(W_I x)^T (W_T t_c)`, lowest index on ties.
fn predict(scores: &Mat, j: usize) -> usize {
    let mut best = 0;
    for c in 1..scores.rows() {
        if scores.get(c, j) > scores.get(best, j) {
            best = c;
        }
    }
    best
}

/// Percentage of `data` classified correctly by prototype similarity.
pub fn zero_shot_accuracy(
    w_img: &Mat,
    w_txt: &Mat,
    data: &LabeledSet,
    prototypes: &Mat,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let h_img = w_img.try_mul(data.x())?;
    let h_txt = w_txt.try_mul(prototypes)?;
    let scores = h_txt.transpose().try_mul(&h_img)?;
    let correct = data
        .labels()
        .iter()
        .enumerate()
        .filter(|&(j, &y)| predict(&scores, j) == y)
        .count();
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Minimum-norm optimum of the linear contrastive problem on the pretraining set,
/// reached from a zero initialization. No pretraining pairs gives the zero encoder.
pub fn pretrain_linear(tasks: &TaskData) -> Result<Mat> {
    let d = tasks.spec.feature_dim();
    let p = tasks.w_txt.rows();
    if tasks.pretrain.is_empty() {
        return Ok(Mat::zeros(p, d));
    }
    let prob = tasks.target_problem(&tasks.pretrain)?;
    Ok(solve_direct_ft(&prob, &Mat::zeros(p, d))?.weights)
}

/// `acc_pre - acc_post` in percentage points; negative when finetuning helps.
pub fn forgetting_rate(acc_pre: f64, acc_post: f64) -> Result<f64> {
    for (name, v) in [("acc_pre", acc_pre), ("acc_post", acc_post)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::InvalidParameter {
                name,
                value: v,
                reason: "accuracy must lie in [0, 100]",
            });
        }
    }
    Ok(acc_pre - acc_post)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Pretrained,
    DirectFT,
    L2Reg,
    StaticSD,
    DynamicSD,
    TracerToy,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Pretrained,
        Strategy::DirectFT,
        Strategy::L2Reg,
        Strategy::StaticSD,
        Strategy::DynamicSD,
        Strategy::TracerToy,
    ];

    pub fn is_regularized(self) -> bool {
        !matches!(self, Strategy::Pretrained | Strategy::DirectFT)
    }

    pub fn uses_teacher_kernel(self) -> bool {
        matches!(self, Strategy::DynamicSD | Strategy::TracerToy)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Pretrained => "pretrained",
            Strategy::DirectFT => "direct_ft",
            Strategy::L2Reg => "l2_reg",
            Strategy::StaticSD => "static_sd",
            Strategy::DynamicSD => "dynamic_sd",
            Strategy::TracerToy => "tracer_toy",
        }
    }
}

/// What to run: the strategy, its coefficient, and its teacher kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub lambda: Option<f64>,
    pub kernel: Option<KernelSpec>,
}

impl StrategyConfig {
    /// Defaults: `lambda = 1` where regularized, arcsine kernel where a teacher is averaged.
    pub fn new(strategy: Strategy) -> Self {
        StrategyConfig {
            strategy,
            lambda: strategy.is_regularized().then_some(1.0),
            kernel: strategy.uses_teacher_kernel().then(KernelSpec::arcsine),
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        if self.strategy.is_regularized() {
            self.lambda = Some(lambda);
        }
        self
    }

    pub fn with_kernel(mut self, kernel: KernelSpec) -> Self {
        if self.strategy.uses_teacher_kernel() {
            self.kernel = Some(kernel);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_some() != self.strategy.is_regularized() {
            return Err(Error::InvalidParameter {
                name: "lambda",
                value: self.lambda.unwrap_or(f64::NAN),
                reason: "must be set exactly for regularized strategies",
            });
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidParameter {
                    name: "lambda",
                    value: l,
                    reason: "must be nonnegative and finite",
                });
            }
        }
        if let Some(k) = &self.kernel {
            k.validate()?;
        }
        Ok(())
    }
}

/// Settings of the gradient-based distillation loop on the linear model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracerConfig {
    pub iters: usize,
    pub batch_size: usize,
    /// Temperature, component weights and `lambda_sd`; `lambda_sd` is
    /// overwritten by the strategy's `lambda`.
    pub distill: DistillConfig,
    /// Allowance for the distillation term's curvature relative to the task
    /// loss; the step is `max_step / (1 + sd_curvature * lambda_sd)`.
    pub sd_curvature: f64,
    /// Teacher absorbs the student every this many iterations.
    pub update_every: usize,
    /// Decay of the passive EMA teacher tracked for comparison.
    pub ema_rho: f64,
}

impl Default for TracerConfig {
    fn default() -> Self {
        TracerConfig {
            iters: 2000,
            batch_size: 64,
            distill: DistillConfig::default(),
            sd_curvature: 4.0,
            update_every: 1,
            ema_rho: 0.99,
        }
    }
}

/// Settings shared by every strategy of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    /// Teacher horizon of the exact dynamic self-distillation loop.
    pub dynamic_steps: usize,
    pub dynamic_update_every: usize,
    pub tracer: TracerConfig,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            dynamic_steps: 10,
            dynamic_update_every: 1,
            tracer: TracerConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunMetrics {
    /// Image encoder after finetuning.
    pub weights: Mat,
    pub acc_original: f64,
    pub acc_new: f64,
    pub forgetting: f64,
    pub trajectory: Option<SdwmaTrajectory>,
    /// Final `||teacher - student||` of the averaged teacher, for teacher-based runs.
    pub teacher_gap: Option<f64>,
    /// Same gap for a passive EMA teacher on the same student path.
    pub ema_gap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub config: StrategyConfig,
    pub metrics: RunMetrics,
}

/// Final student and teacher gaps of the distillation loop.
#[derive(Debug, Clone)]
pub struct TracerOutcome {
    pub w_student: Mat,
    pub w_teacher: Mat,
    pub w_ema: Mat,
    pub step: f64,
}

/// Minibatch gradient descent on `1/(2B) ||W X_B - Y_B||^2` plus `lambda_sd`
/// times the composite distillation loss against a weight-averaged teacher.
/// Batches are contiguous blocks taken cyclically; the text side is frozen.
pub fn run_tracer_toy(
    tasks: &TaskData,
    pre_weights: &Mat,
    lambda_sd: f64,
    kernel: KernelSpec,
    cfg: &TracerConfig,
) -> Result<TracerOutcome> {
    if cfg.iters == 0 || cfg.batch_size == 0 || cfg.update_every == 0 {
        return Err(Error::InvalidParameter {
            name: "tracer",
            value: 0.0,
            reason: "iters, batch_size and update_every must be positive",
        });
    }
    if !(cfg.sd_curvature >= 0.0 && cfg.sd_curvature.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "sd_curvature",
            value: cfg.sd_curvature,
            reason: "must be nonnegative",
        });
    }
    let distill = DistillConfig {
        lambda_sd,
        ..cfg.distill
    };
    distill.validate()?;

    let data = &tasks.finetune;
    let prob = tasks.target_problem(data)?;
    let y = prob.y_ft();
    let n = data.len();
    let batches: Vec<(Mat, Mat, Mat)> = (0..n.div_ceil(cfg.batch_size))
        .map(|b| {
            let lo = b * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(n);
            let cols: Vec<usize> = (lo..hi).collect();
            let part = data.slice(lo..hi);
            let h_txt = (&tasks.w_txt * &tasks.text_inputs(&part)).transpose();
            (part.x().clone(), y.select_columns(&cols), h_txt)
        })
        .collect();

    let mut task_step = f64::INFINITY;
    for (x, _, _) in &batches {
        let gram = (x * &x.transpose()).scale(1.0 / x.cols() as f64);
        let top = lambda_max_sym(&gram);
        if top > 0.0 {
            task_step = task_step.min(0.9 * 2.0 / top);
        }
    }
    if !task_step.is_finite() {
        return Err(Error::InvalidDimensions {
            what: "tracer batches",
            detail: "all finetuning features are zero".into(),
        });
    }
    let step = task_step / (1.0 + cfg.sd_curvature * lambda_sd);

    let grid = TimeGrid::with_default_offsets(cfg.iters)?;
    let mut teacher = TeacherState::new(pre_weights.clone(), kernel, grid)?;
    let mut ema = pre_weights.clone();
    let mut w = pre_weights.clone();
    for t in 1..=cfg.iters {
        let (x, yb, h_txt) = &batches[(t - 1) % batches.len()];
        let inv_b = 1.0 / x.cols() as f64;
        let xt = x.transpose();
        let h_s = &w * x;
        let mut grad = (&(&h_s - yb) * &xt).scale(inv_b);
        if lambda_sd > 0.0 {
            let student = EmbeddingBatch::new(h_s.transpose(), h_txt.clone())?;
            let teach = EmbeddingBatch::new((teacher.weights() * x).transpose(), h_txt.clone())?;
            let g = composite_sd_grad(&teach, &student, &distill)?;
            grad = &grad + &(&g.img.transpose() * &xt).scale(lambda_sd);
        }
        w = &w - &grad.scale(step);
        if !w.is_finite() {
            return Err(Error::NonFinite {
                what: "distillation student",
            });
        }
        if t % cfg.update_every == 0 {
            teacher = wma_update_at(&teacher, &w, t)?;
        }
        ema = ema_update(&ema, &w, cfg.ema_rho)?;
    }
    Ok(TracerOutcome {
        w_student: w,
        w_teacher: teacher.weights().clone(),
        w_ema: ema,
        step,
    })
}

/// Trains one strategy from the pretrained encoder and scores it on both tasks.
pub fn run_strategy(
    cfg: &StrategyConfig,
    tasks: &TaskData,
    pre_weights: &Mat,
    opts: &ExperimentOptions,
) -> Result<RunMetrics> {
    cfg.validate()?;
    let lambda = cfg.lambda.unwrap_or(0.0);
    let kernel = cfg.kernel.unwrap_or_else(KernelSpec::arcsine);
    let mut trajectory = None;
    let mut teacher_gap = None;
    let mut ema_gap = None;
    let weights = match cfg.strategy {
        Strategy::Pretrained => pre_weights.clone(),
        Strategy::DirectFT => {
            solve_direct_ft(&tasks.target_problem(&tasks.finetune)?, pre_weights)?.weights
        }
        Strategy::L2Reg => {
            solve_l2sp(&tasks.target_problem(&tasks.finetune)?, pre_weights, lambda)?.weights
        }
        Strategy::StaticSD => {
            solve_static_sd(&tasks.target_problem(&tasks.finetune)?, pre_weights, lambda)?.weights
        }
        Strategy::DynamicSD => {
            let traj = run_sdwma_with(
                &tasks.target_problem(&tasks.finetune)?,
                pre_weights,
                &SdwmaConfig {
                    lambda,
                    kernel,
                    grid: TimeGrid::with_default_offsets(opts.dynamic_steps)?,
                    update_every: opts.dynamic_update_every,
                },
            )?;
            let last = traj.final_record();
            let w = last.w_student.clone();
            teacher_gap = Some(last.gap_teacher_student);
            trajectory = Some(traj);
            w
        }
        Strategy::TracerToy => {
            let out = run_tracer_toy(tasks, pre_weights, lambda, kernel, &opts.tracer)?;
            teacher_gap = Some((&out.w_teacher - &out.w_student).frobenius_norm());
            ema_gap = Some((&out.w_ema - &out.w_student).frobenius_norm());
            out.w_student
        }
    };
    let acc =
        |w: &Mat, set: &LabeledSet| zero_shot_accuracy(w, &tasks.w_txt, set, &tasks.prototypes);
    let acc_pre = acc(pre_weights, &tasks.eval_original)?;
    let acc_original = acc(&weights, &tasks.eval_original)?;
    Ok(RunMetrics {
        acc_original,
        acc_new: acc(&weights, &tasks.eval_new)?,
        weights,
        forgetting: forgetting_rate(acc_pre, acc_original)?,
        trajectory,
        teacher_gap,
        ema_gap,
    })
}

/// Generates the task for `spec`, pretrains, and runs every configuration on it.
pub fn run_seed(
    spec: &SyntheticTask,
    configs: &[StrategyConfig],
    opts: &ExperimentOptions,
) -> Result<Vec<StrategyRun>> {
    let tasks = generate_tasks(spec)?;
    let pre = pretrain_linear(&tasks)?;
    configs
        .iter()
        .map(|cfg| {
            Ok(StrategyRun {
                config: *cfg,
                metrics: run_strategy(cfg, &tasks, &pre, opts)?,
            })
        })
        .collect()
}

/// One line of the trade-off table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoRow {
    pub strategy: Strategy,
    pub acc_original: f64,
    pub acc_new: f64,
    pub forgetting: f64,
    /// No other row is at least as good on both tasks and better on one.
    pub pareto_optimal: bool,
}

/// Whether `(a_orig, a_new)` dominates `(b_orig, b_new)`.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 >= b.0 && a.1 >= b.1 && (a.0 > b.0 || a.1 > b.1)
}

/// Rows in strategy order (stable for equal strategies), with Pareto marks.
pub fn pareto_table(runs: &[StrategyRun]) -> Vec<ParetoRow> {
    let mut rows: Vec<ParetoRow> = runs
        .iter()
        .map(|r| ParetoRow {
            strategy: r.config.strategy,
            acc_original: r.metrics.acc_original,
            acc_new: r.metrics.acc_new,
            forgetting: r.metrics.forgetting,
            pareto_optimal: true,
        })
        .collect();
    rows.sort_by_key(|r| r.strategy);
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.acc_original, r.acc_new)).collect();
    for (i, row) in rows.iter_mut().enumerate() {
        row.pareto_optimal = !points
            .iter()
            .enumerate()
            .any(|(j, &q)| j != i && dominates(q, points[i]));
    }
    rows
}

/// Per-strategy means over seeds, in strategy order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub mean_acc_original: f64,
    pub mean_acc_new: f64,
    pub mean_forgetting: f64,
    pub seeds: usize,
}

pub fn summarize(runs: &[StrategyRun]) -> Vec<StrategySummary> {
    let mut out = Vec::new();
    for s in Strategy::ALL {
        let mine: Vec<&RunMetrics> = runs
            .iter()
            .filter(|r| r.config.strategy == s)
            .map(|r| &r.metrics)
            .collect();
        if mine.is_empty() {
            continue;
        }
        let k = mine.len() as f64;
        let mean = |f: fn(&RunMetrics) -> f64| mine.iter().map(|m| f(m)).sum::<f64>() / k;
        out.push(StrategySummary {
            strategy: s,
            mean_acc_original: mean(|m| m.acc_original),
            mean_acc_new: mean(|m| m.acc_new),
            mean_forgetting: mean(|m| m.forgetting),
            seeds: mine.len(),
        });
    }
    out
}

/// Forgetting order `DirectFT > L2Reg > StaticSD >= DynamicSD` on seed means,
/// and every finetuned strategy within 90% of DirectFT's new-task accuracy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingReport {
    pub direct_over_l2: bool,
    pub l2_over_static: bool,
    pub static_over_dynamic: bool,
    pub new_task_retained: bool,
    pub holds: bool,
}

pub fn ordering_report(summary: &[StrategySummary]) -> Option<OrderingReport> {
    let get = |s: Strategy| summary.iter().find(|r| r.strategy == s);
    let ft = get(Strategy::DirectFT)?;
    let l2 = get(Strategy::L2Reg)?;
    let st = get(Strategy::StaticSD)?;
    let dy = get(Strategy::DynamicSD)?;
    let direct_over_l2 = ft.mean_forgetting > l2.mean_forgetting;
    let l2_over_static = l2.mean_forgetting > st.mean_forgetting;
    let static_over_dynamic = st.mean_forgetting >= dy.mean_forgetting;
    let new_task_retained = summary
        .iter()
        .filter(|r| r.strategy != Strategy::Pretrained)
        .all(|r| r.mean_acc_new >= 0.9 * ft.mean_acc_new);
    Some(OrderingReport {
        direct_over_l2,
        l2_over_static,
        static_over_dynamic,
        new_task_retained,
        holds: direct_over_l2 && l2_over_static && static_over_dynamic && new_task_retained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticTask {
        SyntheticTask {
            n_train: 128,
            n_eval: 256,
            ..SyntheticTask::default()
        }
    }

    #[test]
    fn features_have_core_plus_spurious_rows() {
        let t = generate_tasks(&small()).unwrap();
        assert_eq!(t.pretrain.x().rows(), 24);
        assert_eq!(t.eval_new.x().cols(), 256);
    }

    #[test]
    fn text_encoder_has_orthonormal_columns_so_prototypes_are_distinct() {
        let t = generate_tasks(&small()).unwrap();
        let g = &t.w_txt.transpose() * &t.w_txt;
        assert!((&g - &Mat::identity(4)).max_abs() < 1e-12);
    }

    #[test]
    fn fixed_seed_gives_identical_data() {
        let a = generate_tasks(&small()).unwrap();
        let b = generate_tasks(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_tasks(&small().with_seed(1)).unwrap();
        assert_ne!(a.finetune, c.finetune);
    }

    fn observed_color(spec: &SyntheticTask, x: &Mat, j: usize) -> usize {
        (0..spec.n_colors)
            .find(|&c| {
                let pat = spec.color_pattern(c);
                pat.iter()
                    .enumerate()
                    .all(|(i, &v)| x.get(spec.core_dim + i, j) == v)
            })
            .unwrap()
    }

    #[test]
    fn full_correlation_makes_the_pattern_predict_the_label() {
        let spec = SyntheticTask {
            spurious_corr: 1.0,
            n_colors: 4,
            ..small()
        };
        let t = generate_tasks(&spec).unwrap();
        for (j, &y) in t.finetune.labels().iter().enumerate() {
            assert_eq!(observed_color(&spec, t.finetune.x(), j), y);
        }
    }

    #[test]
    fn half_correlation_makes_the_pattern_independent_of_the_label() {
        let spec = SyntheticTask {
            spurious_corr: 0.5,
            n_train: 8000,
            ..small()
        };
        let t = generate_tasks(&spec).unwrap();
        // P(color | class) should be 1/2 for every (class, color).
        let mut counts = [[0usize; 2]; 4];
        for (j, &y) in t.finetune.labels().iter().enumerate() {
            counts[y][observed_color(&spec, t.finetune.x(), j)] += 1;
        }
        for row in counts {
            let frac = row[0] as f64 / (row[0] + row[1]) as f64;
            assert!((frac - 0.5).abs() < 0.04, "{frac}");
        }
    }

    #[test]
    fn original_task_pattern_is_uninformative_even_at_full_correlation() {
        let spec = SyntheticTask {
            spurious_corr: 1.0,
            n_train: 4000,
            ..small()
        };
        let t = generate_tasks(&spec).unwrap();
        let agree = t
            .pretrain
            .labels()
            .iter()
            .enumerate()
            .filter(|&(j, &y)| observed_color(&spec, t.pretrain.x(), j) == spec.color_group(y))
            .count() as f64
            / 4000.0;
        assert!((agree - 0.5).abs() < 0.04, "{agree}");
    }

    #[test]
    fn degenerate_dims_are_rejected() {
        for bad in [
            SyntheticTask {
                n_classes: 1,
                ..small()
            },
            SyntheticTask {
                core_dim: 2,
                ..small()
            },
            SyntheticTask {
                spurious_dim: 0,
                ..small()
            },
            SyntheticTask {
                n_train: 0,
                ..small()
            },
            SyntheticTask {
                embed_dim: 3,
                ..small()
            },
        ] {
            assert!(matches!(
                generate_tasks(&bad),
                Err(Error::InvalidDimensions { .. })
            ));
        }
        let corr = SyntheticTask {
            spurious_corr: 1.5,
            ..small()
        };
        assert!(matches!(
            generate_tasks(&corr),
            Err(Error::InvalidParameter { .. })
        ));
    }

    #[test]
    fn encoder_aligned_with_class_means_is_perfect_without_noise() {
        let spec = SyntheticTask {
            noise: 0.0,
            ..small()
        };
        let t = generate_tasks(&spec).unwrap();
        // W maps class mean c to W_T e_c and ignores the spurious block.
        let mut m = Mat::zeros(4, 24);
        for c in 0..4 {
            for (i, v) in spec.class_mean(c).into_iter().enumerate() {
                m.set(c, i, v);
            }
        }
        let w = &t.w_txt * &m;
        for set in [&t.eval_original, &t.eval_new] {
            assert_eq!(
                zero_shot_accuracy(&w, &t.w_txt, set, &t.prototypes).unwrap(),
                100.0
            );
        }
    }

    #[test]
    fn zero_encoder_ties_to_class_zero() {
        let t = generate_tasks(&small()).unwrap();
        let acc =
            zero_shot_accuracy(&Mat::zeros(8, 24), &t.w_txt, &t.eval_new, &t.prototypes).unwrap();
        assert_eq!(acc, 25.0);
    }

    #[test]
    fn accuracy_matches_a_naive_loop() {
        let t = generate_tasks(&small()).unwrap();
        let w = Mat::from_fn(8, 24, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let mut correct = 0;
        for (j, &y) in t.eval_new.labels().iter().enumerate() {
            let mut best = (f64::NEG_INFINITY, 0);
            for c in 0..4 {
                let mut s = 0.0;
                for k in 0..8 {
                    let mut hi = 0.0;
                    for i in 0..24 {
                        hi += w.get(k, i) * t.eval_new.x().get(i, j);
                    }
                    s += hi * t.w_txt.get(k, c);
                }
                if s > best.0 {
                    best = (s, c);
                }
            }
            correct += usize::from(best.1 == y);
        }
        let want = 100.0 * correct as f64 / t.eval_new.len() as f64;
        let got = zero_shot_accuracy(&w, &t.w_txt, &t.eval_new, &t.prototypes).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn empty_eval_set_is_an_error() {
        let t = generate_tasks(&small()).unwrap();
        let empty = LabeledSet::new(Mat::zeros(24, 0), vec![]).unwrap();
        assert_eq!(
            zero_shot_accuracy(&Mat::zeros(8, 24), &t.w_txt, &empty, &t.prototypes),
            Err(Error::EmptyEvalSet)
        );
    }

    #[test]
    fn pretraining_beats_chance_by_a_wide_margin() {
        let t = generate_tasks(&small()).unwrap();
        let w0 = pretrain_linear(&t).unwrap();
        let acc = zero_shot_accuracy(&w0, &t.w_txt, &t.eval_original, &t.prototypes).unwrap();
        assert!(acc > 1.5 * 25.0, "{acc}");
    }

    #[test]
    fn no_pretraining_pairs_give_the_zero_encoder() {
        let mut t = generate_tasks(&small()).unwrap();
        t.pretrain = LabeledSet::new(Mat::zeros(24, 0), vec![]).unwrap();
        assert_eq!(pretrain_linear(&t).unwrap(), Mat::zeros(8, 24));
    }

    #[test]
    fn pretraining_on_full_rank_data_is_determined_on_the_whole_space() {
        // One pattern per spurious coordinate, so the features span everything.
        let spec = SyntheticTask {
            spurious_dim: 4,
            n_colors: 4,
            ..small()
        };
        let t = generate_tasks(&spec).unwrap();
        let prob = t.target_problem(&t.pretrain).unwrap();
        assert!((prob.p_i() - &Mat::identity(20)).max_abs() < 1e-9);
        // Any start gives the same optimum when the projector is the identity.
        let a = solve_direct_ft(&prob, &Mat::ones(8, 20)).unwrap().weights;
        assert!((&a - &pretrain_linear(&t).unwrap()).max_abs() < 1e-9);
    }

    #[test]
    fn forgetting_is_an_absolute_point_drop() {
        assert!((forgetting_rate(96.8, 59.0).unwrap() - 37.8).abs() < 1e-12);
        assert_eq!(forgetting_rate(70.0, 70.0).unwrap(), 0.0);
        assert_eq!(forgetting_rate(50.0, 60.0).unwrap(), -10.0);
        assert!(forgetting_rate(101.0, 50.0).is_err());
        assert!(forgetting_rate(50.0, -1.0).is_err());
    }

    #[test]
    fn lambda_is_present_exactly_for_regularized_strategies() {
        for s in Strategy::ALL {
            let cfg = StrategyConfig::new(s);
            assert_eq!(cfg.lambda.is_some(), s.is_regularized());
            cfg.validate().unwrap();
        }
        let bad = StrategyConfig {
            lambda: Some(1.0),
            ..StrategyConfig::new(Strategy::DirectFT)
        };
        assert!(bad.validate().is_err());
    }

    fn setup() -> (TaskData, Mat) {
        let t = generate_tasks(&small()).unwrap();
        let w0 = pretrain_linear(&t).unwrap();
        (t, w0)
    }

    #[test]
    fn pretrained_strategy_forgets_nothing() {
        let (t, w0) = setup();
        let m = run_strategy(
            &StrategyConfig::new(Strategy::Pretrained),
            &t,
            &w0,
            &ExperimentOptions::default(),
        )
        .unwrap();
        assert_eq!(m.forgetting, 0.0);
    }

    #[test]
    fn huge_static_lambda_keeps_the_pretrained_accuracy() {
        let (t, w0) = setup();
        let opts = ExperimentOptions::default();
        let pre = run_strategy(&StrategyConfig::new(Strategy::Pretrained), &t, &w0, &opts).unwrap();
        let sd = run_strategy(
            &StrategyConfig::new(Strategy::StaticSD).with_lambda(1e12),
            &t,
            &w0,
            &opts,
        )
        .unwrap();
        assert_eq!(sd.acc_original, pre.acc_original);
        assert_eq!(sd.acc_new, pre.acc_new);
    }

    #[test]
    fn direct_finetuning_learns_the_new_task_and_forgets_the_old() {
        let (t, w0) = setup();
        let opts = ExperimentOptions::default();
        let pre = run_strategy(&StrategyConfig::new(Strategy::Pretrained), &t, &w0, &opts).unwrap();
        let ft = run_strategy(&StrategyConfig::new(Strategy::DirectFT), &t, &w0, &opts).unwrap();
        assert!(ft.acc_new > 90.0, "{}", ft.acc_new);
        assert!(ft.acc_original < pre.acc_original);
    }

    #[test]
    fn dynamic_run_keeps_its_trajectory() {
        let (t, w0) = setup();
        let m = run_strategy(
            &StrategyConfig::new(Strategy::DynamicSD),
            &t,
            &w0,
            &ExperimentOptions::default(),
        )
        .unwrap();
        let traj = m.trajectory.unwrap();
        assert_eq!(traj.records.len(), 11);
        assert!(traj.max_orthogonal_drift() < 1e-10);
    }

    #[test]
    fn tracer_without_distillation_is_plain_minibatch_descent() {
        let (t, w0) = setup();
        let cfg = TracerConfig {
            iters: 40,
            ..TracerConfig::default()
        };
        let a = run_tracer_toy(&t, &w0, 0.0, KernelSpec::arcsine(), &cfg).unwrap();
        let b = run_tracer_toy(&t, &w0, 0.0, KernelSpec::Uniform, &cfg).unwrap();
        // The teacher never feeds back when lambda is zero.
        assert_eq!(a.w_student, b.w_student);
        assert_ne!(a.w_teacher, b.w_teacher);
    }

    #[test]
    fn tracer_is_deterministic_and_finite() {
        let (t, w0) = setup();
        let cfg = TracerConfig {
            iters: 60,
            ..TracerConfig::default()
        };
        let a = run_tracer_toy(&t, &w0, 1.0, KernelSpec::arcsine(), &cfg).unwrap();
        let b = run_tracer_toy(&t, &w0, 1.0, KernelSpec::arcsine(), &cfg).unwrap();
        assert_eq!(a.w_student, b.w_student);
        assert!(a.w_student.is_finite());
        assert!(a.step > 0.0);
    }

    fn fake(strategy: Strategy, orig: f64, new: f64) -> StrategyRun {
        StrategyRun {
            config: StrategyConfig::new(strategy),
            metrics: RunMetrics {
                weights: Mat::zeros(1, 1),
                acc_original: orig,
                acc_new: new,
                forgetting: 90.0 - orig,
                trajectory: None,
                teacher_gap: None,
                ema_gap: None,
            },
        }
    }

    #[test]
    fn single_run_is_pareto_optimal() {
        let rows = pareto_table(&[fake(Strategy::L2Reg, 50.0, 50.0)]);
        assert!(rows[0].pareto_optimal);
    }

    #[test]
    fn pareto_marks_follow_dominance() {
        let rows = pareto_table(&[
            fake(Strategy::StaticSD, 80.0, 90.0),
            fake(Strategy::DirectFT, 60.0, 90.0),
            fake(Strategy::Pretrained, 90.0, 40.0),
        ]);
        let order: Vec<Strategy> = rows.iter().map(|r| r.strategy).collect();
        assert_eq!(
            order,
            [Strategy::Pretrained, Strategy::DirectFT, Strategy::StaticSD]
        );
        let marks: Vec<bool> = rows.iter().map(|r| r.pareto_optimal).collect();
        assert_eq!(marks, [true, false, true]);
        assert!(!dominates((1.0, 1.0), (1.0, 1.0)));
        assert!(dominates((1.0, 2.0), (1.0, 1.0)));
    }

    #[test]
    fn summary_averages_per_strategy() {
        let runs = [
            fake(Strategy::DirectFT, 60.0, 90.0),
            fake(Strategy::DirectFT, 70.0, 80.0),
        ];
        let s = summarize(&runs);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean_acc_original, 65.0);
        assert_eq!(s[0].seeds, 2);
    }
}
