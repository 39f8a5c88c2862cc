//! Weighted-moving-average (WMA) and EMA teachers, and the SD-WMA loop.
//!
//! A WMA teacher averages the student's history with weights `alpha_k =
//! kappa(tau_k)` from a kernel on normalized time `tau_k = (k+c1)/(T+c2)`.
//! The online form only needs the running mass `A_t = sum_{j<=t} alpha_j`:
//!
//! ```text
//! omega_t = alpha_t / A_t,   teacher_t = (1 - omega_t) teacher_{t-1} + omega_t W_t
//! ```
//!
//! Inside the task subspace the self-distillation step mixes the teacher and
//! `W*`, so the teacher error `E_t = (teacher_t - W*) P` shrinks by exactly
//! `1 - omega_t/(1+lambda)` per update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{pinv_sym, Mat, SvdTolerance};
use crate::objective::TargetProblem;

/// Weighting kernel over normalized time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    /// Unnormalized Beta density `tau^(b1-1) (1-tau)^(b2-1)`.
    Beta {
        beta1: f64,
        beta2: f64,
    },
    Uniform,
    /// `alpha_0` at step 0, `(1-rho)/rho^t * alpha_0` afterwards, so `omega_t = 1 - rho`.
    EmaEquivalent {
        rho: f64,
        alpha0: f64,
    },
    /// Teacher jumps to the latest student (`omega_t = 1`).
    LastIterate,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, value, reason| {
            Err(Error::InvalidParameter {
                name,
                value,
                reason,
            })
        };
        match *self {
            KernelSpec::Beta { beta1, beta2 } => {
                if !(beta1 > 0.0 && beta1.is_finite()) {
                    return bad("beta1", beta1, "must be positive");
                }
                if !(beta2 > 0.0 && beta2.is_finite()) {
                    return bad("beta2", beta2, "must be positive");
                }
            }
            KernelSpec::EmaEquivalent { rho, alpha0 } => {
                if !(rho > 0.0 && rho < 1.0) {
                    return bad("rho", rho, "must lie in (0, 1)");
                }
                if !(alpha0 > 0.0 && alpha0.is_finite()) {
                    return bad("alpha0", alpha0, "must be positive");
                }
            }
            KernelSpec::Uniform | KernelSpec::LastIterate => {}
        }
        Ok(())
    }

    pub fn arcsine() -> Self {
        KernelSpec::Beta {
            beta1: 0.5,
            beta2: 0.5,
        }
    }
}

/// Normalized time grid `tau_k = (k + c1)/(T + c2)`, `k = 0..=T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: usize,
    c1: f64,
    c2: f64,
}

impl TimeGrid {
    /// Requires `T >= 1` and `0 < c1 < c2` so every `tau_k` is strictly inside `(0, 1)`.
    pub fn new(horizon: usize, c1: f64, c2: f64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidDimensions {
                what: "time grid",
                detail: "horizon must be at least 1".into(),
            });
        }
        if !(c1 > 0.0 && c1.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "c1",
                value: c1,
                reason: "must be positive",
            });
        }
        if !(c2 > c1 && c2.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "c2",
                value: c2,
                reason: "must exceed c1",
            });
        }
        Ok(TimeGrid { horizon, c1, c2 })
    }

    /// Offsets `c1 = 0.5`, `c2 = 1`.
    pub fn with_default_offsets(horizon: usize) -> Result<Self> {
        TimeGrid::new(horizon, 0.5, 1.0)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn c2(&self) -> f64 {
        self.c2
    }

    pub fn tau(&self, k: usize) -> f64 {
        (k as f64 + self.c1) / (self.horizon as f64 + self.c2)
    }
}

/// `alpha = kappa(tau)` at global step `step`.
pub fn kernel_eval(kernel: &KernelSpec, tau: f64, step: usize) -> Result<f64> {
    kernel.validate()?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidParameter {
            name: "tau",
            value: tau,
            reason: "must lie strictly inside (0, 1)",
        });
    }
    let alpha = match *kernel {
        KernelSpec::Beta { beta1, beta2 } => tau.powf(beta1 - 1.0) * (1.0 - tau).powf(beta2 - 1.0),
        KernelSpec::Uniform | KernelSpec::LastIterate => 1.0,
        KernelSpec::EmaEquivalent { rho, alpha0 } => {
            if step == 0 {
                alpha0
            } else {
                (1.0 - rho) / rho.powi(step as i32) * alpha0
            }
        }
    };
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::DegenerateKernelMass { step });
    }
    Ok(alpha)
}

/// WMA teacher. Values are immutable; [`wma_update`] returns a new state.
#[derive(Debug, Clone)]
pub struct TeacherState {
    weights: Mat,
    cumulative_alpha: f64,
    step: usize,
    kernel: KernelSpec,
    grid: TimeGrid,
    /// `(step, alpha)` for every iterate absorbed so far, starting with `W0`.
    history: Vec<(usize, f64)>,
    last_omega: f64,
}

impl TeacherState {
    /// Teacher at step 0, equal to `w0` with mass `alpha_0`.
    pub fn new(w0: Mat, kernel: KernelSpec, grid: TimeGrid) -> Result<Self> {
        let alpha0 = kernel_eval(&kernel, grid.tau(0), 0)?;
        Ok(TeacherState {
            weights: w0,
            cumulative_alpha: alpha0,
            step: 0,
            kernel,
            grid,
            history: vec![(0, alpha0)],
            last_omega: 1.0,
        })
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    pub fn cumulative_alpha(&self) -> f64 {
        self.cumulative_alpha
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// `omega` of the most recent update (1 for the initial state).
    pub fn last_omega(&self) -> f64 {
        self.last_omega
    }

    /// Steps of the absorbed iterates and their weights `omega_{k|t}` in the current average.
    pub fn history_weights(&self) -> Vec<(usize, f64)> {
        if self.kernel == KernelSpec::LastIterate {
            let last = self.history.len() - 1;
            return self
                .history
                .iter()
                .enumerate()
                .map(|(i, &(k, _))| (k, if i == last { 1.0 } else { 0.0 }))
                .collect();
        }
        self.history
            .iter()
            .map(|&(k, a)| (k, a / self.cumulative_alpha))
            .collect()
    }

    /// `omega_{0|t}`: how much of `W0` is still inside the teacher.
    pub fn initial_weight(&self) -> f64 {
        self.history_weights()[0].1
    }
}

/// Absorbs the student iterate of the next step.
pub fn wma_update(state: &TeacherState, w_student: &Mat) -> Result<TeacherState> {
    wma_update_at(state, w_student, state.step + 1)
}

/// Absorbs the student iterate of global step `step`; the steps in between
/// are skipped and contribute no mass.
pub fn wma_update_at(state: &TeacherState, w_student: &Mat, step: usize) -> Result<TeacherState> {
    if step <= state.step || step > state.grid.horizon {
        return Err(Error::HorizonExceeded {
            step,
            horizon: state.grid.horizon,
        });
    }
    if w_student.shape() != state.weights.shape() {
        return Err(Error::ShapeMismatch {
            op: "wma_update",
            left: state.weights.shape(),
            right: w_student.shape(),
        });
    }
    let alpha = kernel_eval(&state.kernel, state.grid.tau(step), step)?;
    let (cumulative, omega) = if state.kernel == KernelSpec::LastIterate {
        (alpha, 1.0)
    } else {
        let a = state.cumulative_alpha + alpha;
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::DegenerateKernelMass { step });
        }
        (a, alpha / a)
    };
    let weights = state.weights.lerp(w_student, omega);
    let mut history = state.history.clone();
    history.push((step, alpha));
    Ok(TeacherState {
        weights,
        cumulative_alpha: cumulative,
        step,
        kernel: state.kernel,
        grid: state.grid,
        history,
        last_omega: omega,
    })
}

/// `rho * teacher + (1 - rho) * student`.
pub fn ema_update(w_teacher: &Mat, w_student: &Mat, rho: f64) -> Result<Mat> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidParameter {
            name: "rho",
            value: rho,
            reason: "must lie in (0, 1)",
        });
    }
    if w_teacher.shape() != w_student.shape() {
        return Err(Error::ShapeMismatch {
            op: "ema_update",
            left: w_teacher.shape(),
            right: w_student.shape(),
        });
    }
    Ok(w_teacher.lerp(w_student, 1.0 - rho))
}

/// Exact minimizer of one self-distillation step anchored at the teacher:
/// `W_prev (I - P) + lambda/(1+lambda) teacher P + 1/(1+lambda) W*`.
pub fn sdwma_step(
    prob: &TargetProblem,
    w_student_prev: &Mat,
    w_teacher_prev: &Mat,
    lambda: f64,
) -> Result<Mat> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "lambda",
            value: lambda,
            reason: "must be positive and finite",
        });
    }
    let shape = (prob.p(), prob.d_img());
    for m in [w_student_prev, w_teacher_prev] {
        if m.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "sdwma_step",
                left: m.shape(),
                right: shape,
            });
        }
    }
    let p = prob.p_i();
    let orth = w_student_prev - &(w_student_prev * p);
    // Projecting the sum keeps round-off in W* from leaking into the complement.
    let mix =
        &w_teacher_prev.scale(lambda / (1.0 + lambda)) + &prob.w_star().scale(1.0 / (1.0 + lambda));
    let par = &mix * p;
    Ok(&orth + &par)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdwmaConfig {
    pub lambda: f64,
    pub kernel: KernelSpec,
    pub grid: TimeGrid,
    /// Teacher absorbs the student only on steps divisible by this.
    pub update_every: usize,
}

#[derive(Debug, Clone)]
pub struct SdwmaRecord {
    pub step: usize,
    pub w_student: Mat,
    pub w_teacher: Mat,
    /// Weight of this step's update; 0 when the teacher was held.
    pub omega: f64,
    /// `omega_{0|t}`, the share of `W0` still inside the teacher.
    pub initial_weight: f64,
    /// `||(teacher - W*) P||`.
    pub err_teacher: f64,
    /// `||(student - W*) P||`.
    pub err_student: f64,
    pub gap_teacher_student: f64,
    /// `||W_t (I-P) - W0 (I-P)||`.
    pub orthogonal_drift: f64,
    /// Relative deviation of `||E_t||/||E_{t-1}||` from `1 - omega/(1+lambda)`;
    /// `None` once `||E_{t-1}||` is too small to measure a ratio.
    pub contraction_residual: Option<f64>,
    /// `||(W_t - W*) P - lambda/(1+lambda) E_{t-1}||`.
    pub tracking_residual: f64,
}

#[derive(Debug, Clone)]
pub struct SdwmaTrajectory {
    pub lambda: f64,
    pub records: Vec<SdwmaRecord>,
}

impl SdwmaTrajectory {
    pub fn final_record(&self) -> &SdwmaRecord {
        self.records.last().expect("trajectory always holds step 0")
    }

    /// `||E_T|| / ||E_0||`.
    pub fn teacher_error_ratio(&self) -> f64 {
        let e0 = self.records[0].err_teacher;
        if e0 == 0.0 {
            0.0
        } else {
            self.final_record().err_teacher / e0
        }
    }

    pub fn max_contraction_residual(&self) -> f64 {
        self.records
            .iter()
            .filter_map(|r| r.contraction_residual)
            .fold(0.0, f64::max)
    }

    /// Tracking residual relative to `1 + ||E_{t-1}||`.
    pub fn max_tracking_residual(&self) -> f64 {
        self.records
            .windows(2)
            .map(|w| w[1].tracking_residual / (1.0 + w[0].err_teacher))
            .fold(0.0, f64::max)
    }

    pub fn max_orthogonal_drift(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.orthogonal_drift)
            .fold(0.0, f64::max)
    }
}

/// Below this teacher error the step ratio is not measured.
const RATIO_FLOOR: f64 = 1e-8;

/// Alternates [`sdwma_step`] and the teacher update for the grid's horizon.
pub fn run_sdwma(
    prob: &TargetProblem,
    w0: &Mat,
    lambda: f64,
    kernel: KernelSpec,
    grid: TimeGrid,
) -> Result<SdwmaTrajectory> {
    run_sdwma_with(
        prob,
        w0,
        &SdwmaConfig {
            lambda,
            kernel,
            grid,
            update_every: 1,
        },
    )
}

pub fn run_sdwma_with(
    prob: &TargetProblem,
    w0: &Mat,
    cfg: &SdwmaConfig,
) -> Result<SdwmaTrajectory> {
    if cfg.update_every == 0 {
        return Err(Error::InvalidParameter {
            name: "update_every",
            value: 0.0,
            reason: "must be at least 1",
        });
    }
    let lambda = cfg.lambda;
    let p = prob.p_i();
    let perp = prob.p_perp();
    let w_star_p = prob.w_star() * p;
    let w0_perp = w0 * &perp;
    let par_err = |w: &Mat| &(w * p) - &w_star_p;

    let mut teacher = TeacherState::new(w0.clone(), cfg.kernel, cfg.grid)?;
    let mut student = w0.clone();
    let e0 = par_err(w0).frobenius_norm();
    let mut records = Vec::with_capacity(cfg.grid.horizon() + 1);
    records.push(SdwmaRecord {
        step: 0,
        w_student: w0.clone(),
        w_teacher: w0.clone(),
        omega: 1.0,
        initial_weight: 1.0,
        err_teacher: e0,
        err_student: e0,
        gap_teacher_student: 0.0,
        orthogonal_drift: 0.0,
        contraction_residual: None,
        tracking_residual: 0.0,
    });

    for t in 1..=cfg.grid.horizon() {
        let e_prev = par_err(teacher.weights());
        let e_prev_norm = e_prev.frobenius_norm();
        student = sdwma_step(prob, &student, teacher.weights(), lambda)?;
        let omega = if t % cfg.update_every == 0 {
            teacher = wma_update_at(&teacher, &student, t)?;
            teacher.last_omega()
        } else {
            0.0
        };
        let e_t = par_err(teacher.weights()).frobenius_norm();
        let contraction_residual = (e_prev_norm > RATIO_FLOOR).then(|| {
            let want = 1.0 - omega / (1.0 + lambda);
            (e_t / e_prev_norm - want).abs() / want.max(f64::MIN_POSITIVE)
        });
        let tracking = &par_err(&student) - &e_prev.scale(lambda / (1.0 + lambda));
        records.push(SdwmaRecord {
            step: t,
            err_student: par_err(&student).frobenius_norm(),
            gap_teacher_student: (teacher.weights() - &student).frobenius_norm(),
            orthogonal_drift: (&(&student * &perp) - &w0_perp).frobenius_norm(),
            w_teacher: teacher.weights().clone(),
            w_student: student.clone(),
            omega,
            initial_weight: teacher.initial_weight(),
            err_teacher: e_t,
            contraction_residual,
            tracking_residual: tracking.frobenius_norm(),
        });
    }
    Ok(SdwmaTrajectory { lambda, records })
}

/// `prod_t (1 - omega_t/(1+lambda))` over the teacher updates of a horizon,
/// computed from the kernel alone.
pub fn contraction_product(kernel: KernelSpec, grid: TimeGrid, lambda: f64) -> Result<f64> {
    let mut mass = kernel_eval(&kernel, grid.tau(0), 0)?;
    let mut prod = 1.0;
    for t in 1..=grid.horizon() {
        let alpha = kernel_eval(&kernel, grid.tau(t), t)?;
        let omega = if kernel == KernelSpec::LastIterate {
            1.0
        } else {
            mass += alpha;
            alpha / mass
        };
        prod *= 1.0 - omega / (1.0 + lambda);
    }
    Ok(prod)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PersistenceReport {
    pub omega0: f64,
    pub gap_lhs: f64,
    pub gap_rhs: f64,
    /// Absent when `U` leaves `range(C)`, where the bound is vacuous.
    pub grad_lhs: Option<f64>,
    pub grad_rhs: Option<f64>,
    pub mu: Option<f64>,
}

impl PersistenceReport {
    pub fn gap_slack(&self) -> f64 {
        self.gap_lhs - self.gap_rhs
    }

    pub fn grad_slack(&self) -> Option<f64> {
        Some(self.grad_lhs? - self.grad_rhs?)
    }
}

/// Checks that a WMA teacher over `W_k = W0 + a_k U` stays at least
/// `omega_{0|T} ||W_T - W0||` away from the final student, and that the
/// quadratic distillation pull `lambda (W - teacher) C` stays correspondingly large.
pub fn persistence_check(
    w0: &Mat,
    direction_u: &Mat,
    steps_a: &[f64],
    kernel: KernelSpec,
    grid: TimeGrid,
    lambda: f64,
    c_gram: &Mat,
) -> Result<PersistenceReport> {
    if w0.shape() != direction_u.shape() {
        return Err(Error::ShapeMismatch {
            op: "persistence_check",
            left: w0.shape(),
            right: direction_u.shape(),
        });
    }
    if (direction_u.frobenius_norm() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter {
            name: "direction_u",
            value: direction_u.frobenius_norm(),
            reason: "must have unit Frobenius norm",
        });
    }
    if steps_a.len() != grid.horizon() + 1 {
        return Err(Error::InvalidDimensions {
            what: "trajectory offsets",
            detail: format!(
                "expected {} values, got {}",
                grid.horizon() + 1,
                steps_a.len()
            ),
        });
    }
    if steps_a[0] != 0.0 {
        return Err(Error::InvalidParameter {
            name: "a_0",
            value: steps_a[0],
            reason: "trajectory must start at W0",
        });
    }
    for k in 1..steps_a.len() {
        if steps_a[k].partial_cmp(&steps_a[k - 1]) == Some(std::cmp::Ordering::Less)
            || !steps_a[k].is_finite()
        {
            return Err(Error::NonMonotoneTrajectory { index: k });
        }
    }
    if c_gram.shape() != (w0.cols(), w0.cols()) {
        return Err(Error::ShapeMismatch {
            op: "persistence_check gram",
            left: c_gram.shape(),
            right: (w0.cols(), w0.cols()),
        });
    }

    let mut teacher = TeacherState::new(w0.clone(), kernel, grid)?;
    let w_at = |a: f64| w0 + &direction_u.scale(a);
    for (k, &a) in steps_a.iter().enumerate().skip(1) {
        teacher = wma_update_at(&teacher, &w_at(a), k)?;
    }
    let omega0 = teacher.initial_weight();
    let w_t = w_at(steps_a[grid.horizon()]);
    let diff = &w_t - teacher.weights();
    let gap_lhs = diff.frobenius_norm();
    let gap_rhs = omega0 * (&w_t - w0).frobenius_norm();

    let range = c_gram * &pinv_sym(c_gram, SvdTolerance::default())?;
    let leak = (direction_u - &(direction_u * &range)).frobenius_norm();
    let (grad_lhs, grad_rhs, mu) = if leak < 1e-9 {
        let mu = (0..direction_u.rows())
            .filter_map(|i| {
                let u = direction_u.row(i);
                let uu: f64 = u.iter().map(|v| v * v).sum();
                if uu <= 0.0 {
                    return None;
                }
                let mut quad = 0.0;
                for a in 0..u.len() {
                    for b in 0..u.len() {
                        quad += u[a] * c_gram.get(a, b) * u[b];
                    }
                }
                Some(quad / uu)
            })
            .fold(f64::INFINITY, f64::min);
        let g = (&diff * c_gram).scale(lambda);
        (
            Some(g.frobenius_norm()),
            Some(lambda * mu * gap_rhs),
            Some(mu),
        )
    } else {
        (None, None, None)
    };
    Ok(PersistenceReport {
        omega0,
        gap_lhs,
        gap_rhs,
        grad_lhs,
        grad_rhs,
        mu,
    })
}

/// `||teacher_t - W_t||` for an EMA teacher started at `W_0`.
pub fn ema_gap_decay(w_trajectory: &[Mat], rho: f64) -> Result<Vec<f64>> {
    let Some(first) = w_trajectory.first() else {
        return Ok(Vec::new());
    };
    let mut teacher = first.clone();
    let mut gaps = vec![0.0];
    for w in &w_trajectory[1..] {
        teacher = ema_update(&teacher, w, rho)?;
        gaps.push((&teacher - w).frobenius_norm());
    }
    Ok(gaps)
}

/// `||teacher_t - W_t||` for a WMA teacher over the same trajectory, whose
/// length must be `horizon + 1`.
pub fn wma_gap_series(
    w_trajectory: &[Mat],
    kernel: KernelSpec,
    grid: TimeGrid,
) -> Result<Vec<f64>> {
    if w_trajectory.len() != grid.horizon() + 1 {
        return Err(Error::InvalidDimensions {
            what: "trajectory",
            detail: format!(
                "expected {} iterates, got {}",
                grid.horizon() + 1,
                w_trajectory.len()
            ),
        });
    }
    let mut teacher = TeacherState::new(w_trajectory[0].clone(), kernel, grid)?;
    let mut gaps = vec![0.0];
    for w in &w_trajectory[1..] {
        teacher = wma_update(&teacher, w)?;
        gaps.push((teacher.weights() - w).frobenius_norm());
    }
    Ok(gaps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_form::{anchor_bias, solve_static_sd};
    use crate::gd::{gd_solve, rel_error, GdConfig, QuadProgram};
    use crate::objective::{FinetuneInstance, InstanceDims};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(seed: u64) -> (FinetuneInstance, TargetProblem) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = InstanceDims {
            d_img: 12,
            d_txt: 6,
            p: 4,
            n: 5,
        };
        let inst = FinetuneInstance::random(dims, 0.0, &mut rng).unwrap();
        let prob = TargetProblem::new(&inst).unwrap();
        (inst, prob)
    }

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn kernel_examples() {
        let b11 = KernelSpec::Beta {
            beta1: 1.0,
            beta2: 1.0,
        };
        for tau in [0.01, 0.3, 0.99] {
            assert_eq!(kernel_eval(&b11, tau, 3).unwrap(), 1.0);
        }
        let v = kernel_eval(&KernelSpec::arcsine(), 0.5, 0).unwrap();
        assert!((v - 2.0).abs() < 1e-14);
        let ema = KernelSpec::EmaEquivalent {
            rho: 0.9,
            alpha0: 1.0,
        };
        assert!((kernel_eval(&ema, 0.5, 1).unwrap() - 0.1 / 0.9).abs() < 1e-15);
        assert_eq!(kernel_eval(&ema, 0.5, 0).unwrap(), 1.0);
        assert!(kernel_eval(&KernelSpec::arcsine(), 0.0, 0).is_err());
        assert!(kernel_eval(&KernelSpec::arcsine(), 1.0, 0).is_err());
    }

    #[test]
    fn grid_is_interior() {
        let g = TimeGrid::with_default_offsets(7).unwrap();
        for k in 0..=7 {
            assert!(g.tau(k) > 0.0 && g.tau(k) < 1.0);
        }
        assert!(TimeGrid::new(5, 1.0, 1.0).is_err());
        assert!(TimeGrid::new(5, 0.0, 1.0).is_err());
        assert!(TimeGrid::new(0, 0.5, 1.0).is_err());
    }

    #[test]
    fn uniform_teacher_is_running_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = TimeGrid::with_default_offsets(20).unwrap();
        let ws: Vec<Mat> = (0..=20).map(|_| random_mat(&mut rng, 3, 4)).collect();
        let mut st = TeacherState::new(ws[0].clone(), KernelSpec::Uniform, grid).unwrap();
        for t in 1..=20 {
            st = wma_update(&st, &ws[t]).unwrap();
            let mut mean = Mat::zeros(3, 4);
            for w in &ws[..=t] {
                mean = &mean + w;
            }
            let mean = mean.scale(1.0 / (t + 1) as f64);
            assert!(rel_error(st.weights(), &mean) < 1e-13);
        }
        assert!(wma_update(&st, &ws[0]).is_err());
    }

    #[test]
    fn constant_student_is_a_fixed_point() {
        let c = Mat::from_fn(2, 3, |i, j| (i + j) as f64);
        let grid = TimeGrid::with_default_offsets(10).unwrap();
        let mut st = TeacherState::new(c.clone(), KernelSpec::arcsine(), grid).unwrap();
        for _ in 0..10 {
            st = wma_update(&st, &c).unwrap();
        }
        assert!(rel_error(st.weights(), &c) < 1e-14);
    }

    #[test]
    fn ema_kernel_matches_ema_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kernel = KernelSpec::EmaEquivalent {
            rho: 0.9,
            alpha0: 1.0,
        };
        let grid = TimeGrid::with_default_offsets(100).unwrap();
        let w0 = random_mat(&mut rng, 3, 5);
        let mut st = TeacherState::new(w0.clone(), kernel, grid).unwrap();
        let mut ema = w0;
        for _ in 0..100 {
            let w = random_mat(&mut rng, 3, 5);
            st = wma_update(&st, &w).unwrap();
            ema = ema_update(&ema, &w, 0.9).unwrap();
            assert!((st.last_omega() - 0.1).abs() < 1e-12);
            assert!((st.weights() - &ema).max_abs() < 1e-12);
        }
    }

    #[test]
    fn ema_examples() {
        let t = Mat::zeros(1, 1);
        let s = Mat::from_diagonal(&[2.0]);
        assert_eq!(ema_update(&t, &s, 0.5).unwrap().get(0, 0), 1.0);
        assert!(ema_update(&t, &s, 1.0).is_err());
        assert!(ema_update(&t, &s, 0.0).is_err());

        let c = Mat::from_fn(2, 2, |i, j| (i * 2 + j) as f64);
        let w0 = Mat::zeros(2, 2);
        let mut teacher = w0.clone();
        let rho: f64 = 0.8;
        for t in 1..=50 {
            teacher = ema_update(&teacher, &c, rho).unwrap();
            let want = rho.powi(t) * (&w0 - &c).frobenius_norm();
            assert!(((&teacher - &c).frobenius_norm() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn history_weights_are_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = TimeGrid::with_default_offsets(30).unwrap();
        for kernel in [
            KernelSpec::arcsine(),
            KernelSpec::Uniform,
            KernelSpec::Beta {
                beta1: 2.0,
                beta2: 5.0,
            },
            KernelSpec::LastIterate,
        ] {
            let w0 = random_mat(&mut rng, 2, 3);
            let mut ws = vec![w0.clone()];
            let mut st = TeacherState::new(w0, kernel, grid).unwrap();
            for _ in 0..30 {
                let w = random_mat(&mut rng, 2, 3);
                st = wma_update(&st, &w).unwrap();
                ws.push(w);
                let hw = st.history_weights();
                assert!(hw.iter().all(|&(_, o)| o >= 0.0));
                let total: f64 = hw.iter().map(|&(_, o)| o).sum();
                assert!((total - 1.0).abs() < 1e-12);
                let mut avg = Mat::zeros(2, 3);
                for (i, &(_, o)) in hw.iter().enumerate() {
                    avg = &avg + &ws[i].scale(o);
                }
                assert!(rel_error(st.weights(), &avg) < 1e-12);
            }
        }
    }

    #[test]
    fn held_teacher_keeps_mass_between_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = TimeGrid::with_default_offsets(12).unwrap();
        let w0 = random_mat(&mut rng, 2, 2);
        let st = TeacherState::new(w0, KernelSpec::arcsine(), grid).unwrap();
        let w = random_mat(&mut rng, 2, 2);
        let st4 = wma_update_at(&st, &w, 4).unwrap();
        let a4 = kernel_eval(&KernelSpec::arcsine(), grid.tau(4), 4).unwrap();
        assert!((st4.cumulative_alpha() - st.cumulative_alpha() - a4).abs() < 1e-14);
        assert!(wma_update_at(&st4, &w, 4).is_err());
        assert!(wma_update_at(&st4, &w, 13).is_err());
    }

    #[test]
    fn sdwma_step_examples() {
        let (inst, prob) = problem(5);
        let w0 = inst.w_img0();
        let teacher = &(w0 - &(w0 * prob.p_i())) + prob.w_star();
        let s = sdwma_step(&prob, w0, &teacher, 0.7).unwrap();
        assert!(rel_error(&(&s * prob.p_i()), &(prob.w_star() * prob.p_i())) < 1e-12);

        let s = sdwma_step(&prob, w0, w0, 1.0).unwrap();
        let want = (&(w0 * prob.p_i()) + prob.w_star()).scale(0.5);
        assert!(rel_error(&(&s * prob.p_i()), &want) < 1e-12);
        assert!(sdwma_step(&prob, w0, w0, 0.0).is_err());
    }

    #[test]
    fn sdwma_step_matches_gd_on_anchored_objective() {
        let (inst, prob) = problem(6);
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let prev = &(inst.w_img0() * &prob.p_perp()) + &random_mat(&mut rng, 4, 12);
        let teacher = random_mat(&mut rng, 4, 12);
        let step = sdwma_step(&prob, &prev, &teacher, 1.5).unwrap();
        let q = QuadProgram::sd_anchor(&prob, &teacher, 1.5).unwrap();
        let res = gd_solve(&q, &prev, &GdConfig::default()).unwrap();
        assert!(res.converged);
        assert!(rel_error(&res.w, &step) < 1e-7);
    }

    #[test]
    fn last_iterate_teacher_halves_error_each_step() {
        let (inst, prob) = problem(7);
        let grid = TimeGrid::with_default_offsets(20).unwrap();
        let traj = run_sdwma(&prob, inst.w_img0(), 1.0, KernelSpec::LastIterate, grid).unwrap();
        for w in traj.records.windows(2) {
            assert_eq!(w[1].omega, 1.0);
            if w[0].err_teacher > 1e-8 {
                assert!((w[1].err_teacher / w[0].err_teacher - 0.5).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn arcsine_run_obeys_exact_recursions() {
        let (inst, prob) = problem(8);
        let grid = TimeGrid::with_default_offsets(500).unwrap();
        let traj = run_sdwma(&prob, inst.w_img0(), 1.0, KernelSpec::arcsine(), grid).unwrap();
        assert!(traj.max_contraction_residual() < 1e-9);
        assert!(traj.max_tracking_residual() < 1e-10);
        let scale = 1.0 + inst.w_img0().frobenius_norm();
        assert!(traj.max_orthogonal_drift() < 1e-10 * scale);
        for w in traj.records.windows(2) {
            assert!(w[1].err_teacher <= w[0].err_teacher * (1.0 + 1e-12));
        }
        // the finite-horizon product, independent of any matrices
        let prod = contraction_product(KernelSpec::arcsine(), grid, 1.0).unwrap();
        assert!((traj.teacher_error_ratio() - prod).abs() < 1e-9);
        assert!((prod - 0.150_019_953_4).abs() < 1e-9, "{prod}");
    }

    #[test]
    fn dynamic_teacher_beats_static_anchor() {
        let (inst, prob) = problem(9);
        let w0 = inst.w_img0();
        let bias = anchor_bias(&prob, w0, 1.0).unwrap();
        assert!(bias.frobenius_norm() > 1e-6);
        let sd = solve_static_sd(&prob, w0, 1.0).unwrap();
        let sd_err = (&sd.parallel - &(prob.w_star() * prob.p_i())).frobenius_norm();
        let grid = TimeGrid::with_default_offsets(200).unwrap();
        let traj = run_sdwma(&prob, w0, 1.0, KernelSpec::arcsine(), grid).unwrap();
        assert!(traj.final_record().err_student < sd_err);
    }

    #[test]
    fn linear_rate_under_bounded_step_weight() {
        let (inst, prob) = problem(10);
        let lambda = 2.0;
        let kernel = KernelSpec::EmaEquivalent {
            rho: 0.95,
            alpha0: 1.0,
        };
        let grid = TimeGrid::with_default_offsets(200).unwrap();
        let traj = run_sdwma(&prob, inst.w_img0(), lambda, kernel, grid).unwrap();
        let e0 = traj.records[0].err_teacher;
        for r in &traj.records {
            let bound = (1.0 - 0.05 / (1.0 + lambda)).powi(r.step as i32) * e0;
            assert!(r.err_teacher <= bound * (1.0 + 1e-9));
        }
    }

    #[test]
    fn update_frequency_holds_teacher() {
        let (inst, prob) = problem(11);
        let grid = TimeGrid::with_default_offsets(40).unwrap();
        let cfg = SdwmaConfig {
            lambda: 1.0,
            kernel: KernelSpec::arcsine(),
            grid,
            update_every: 4,
        };
        let traj = run_sdwma_with(&prob, inst.w_img0(), &cfg).unwrap();
        for r in &traj.records[1..] {
            assert_eq!(r.omega > 0.0, r.step % 4 == 0);
        }
        assert!(traj.max_contraction_residual() < 1e-9);
    }

    fn unit_direction(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        let u = random_mat(rng, r, c);
        u.scale(1.0 / u.frobenius_norm())
    }

    #[test]
    fn persistence_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w0 = random_mat(&mut rng, 2, 3);
        let u = unit_direction(&mut rng, 2, 3);
        let c = Mat::identity(3);

        let grid = TimeGrid::with_default_offsets(5).unwrap();
        let rep =
            persistence_check(&w0, &u, &[0.0; 6], KernelSpec::arcsine(), grid, 1.0, &c).unwrap();
        assert_eq!(rep.gap_lhs, 0.0);
        assert_eq!(rep.gap_rhs, 0.0);

        let grid = TimeGrid::with_default_offsets(1).unwrap();
        let rep =
            persistence_check(&w0, &u, &[0.0, 1.0], KernelSpec::Uniform, grid, 1.0, &c).unwrap();
        assert!((rep.omega0 - 0.5).abs() < 1e-15);
        assert!((rep.gap_lhs - 0.5).abs() < 1e-15);
        assert!((rep.gap_rhs - 0.5).abs() < 1e-15);

        let grid = TimeGrid::with_default_offsets(100).unwrap();
        let a: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
        let rep = persistence_check(&w0, &u, &a, KernelSpec::arcsine(), grid, 1.0, &c).unwrap();
        assert!(rep.gap_slack() > 0.0);
        assert!(rep.grad_slack().unwrap() >= -1e-12);

        let mut bad = a.clone();
        bad[50] = 0.0;
        assert!(matches!(
            persistence_check(&w0, &u, &bad, KernelSpec::arcsine(), grid, 1.0, &c),
            Err(Error::NonMonotoneTrajectory { index: 50 })
        ));
        assert!(
            persistence_check(&w0, &u.scale(2.0), &a, KernelSpec::arcsine(), grid, 1.0, &c)
                .is_err()
        );
    }

    #[test]
    fn persistence_skips_gradient_bound_outside_range() {
        let w0 = Mat::zeros(1, 2);
        let u = Mat::from_rows(&[&[0.0, 1.0]]).unwrap();
        let c = Mat::from_diagonal(&[1.0, 0.0]);
        let grid = TimeGrid::with_default_offsets(3).unwrap();
        let rep = persistence_check(
            &w0,
            &u,
            &[0.0, 1.0, 2.0, 3.0],
            KernelSpec::Uniform,
            grid,
            1.0,
            &c,
        )
        .unwrap();
        assert!(rep.grad_lhs.is_none());
        assert!(rep.gap_slack() >= 0.0);
    }

    #[test]
    fn ema_gap_vanishes_while_wma_gap_persists() {
        let a = Mat::from_fn(2, 3, |i, j| 1.0 + (i * 3 + j) as f64);
        let horizon = 60;
        let traj: Vec<Mat> = (0..=horizon)
            .map(|t| a.scale(1.0 - 0.5_f64.powi(t as i32)))
            .collect();
        let constant = vec![a.clone(); 10];
        assert!(ema_gap_decay(&constant, 0.9)
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));

        let ema = ema_gap_decay(&traj, 0.9).unwrap();
        assert!(*ema.last().unwrap() < 1e-2 * ema[1]);

        let grid = TimeGrid::with_default_offsets(horizon).unwrap();
        let wma = wma_gap_series(&traj, KernelSpec::arcsine(), grid).unwrap();
        let mut st = TeacherState::new(traj[0].clone(), KernelSpec::arcsine(), grid).unwrap();
        for w in &traj[1..] {
            st = wma_update(&st, w).unwrap();
        }
        let floor = st.initial_weight() * (&traj[horizon] - &traj[0]).frobenius_norm();
        assert!(floor > 0.0);
        assert!(*wma.last().unwrap() >= floor);

        let at = |rho| ema_gap_decay(&traj, rho).unwrap()[20];
        assert!(at(0.5) < at(0.9) && at(0.9) < at(0.99));
    }
}
