//! Full-batch gradient descent on matrix quadratics `f(W) = 1/2 <W, c W G> - <P, W>`.
//!
//! Every finetuning objective here has this form for some Gram `G`, scalar
//! `c` and linear term `P`. When `P`'s rows lie in `range(G)`, each step
//! `W <- W - step (c W G - P)` leaves `W (I - Pi_G)` untouched, so GD started
//! at `W0` lands on the minimizer that keeps `W0`'s null-space component.
//! Comparing that limit to the closed forms is the point of this module.

use serde::Serialize;

use crate::closed_form::{
    solve_direct_ft, solve_l2sp, solve_static_sd, ClosedFormStrategy, StrategySolution,
};
use crate::error::{Error, Result};
use crate::matcore::{frobenius_inner, lambda_max_sym, pinv_sym, Mat, SvdTolerance};
use crate::objective::{FinetuneInstance, TargetProblem};

/// Quadratic program with Hessian map `W -> scale * W * gram`.
#[derive(Debug, Clone)]
pub struct QuadProgram {
    gram: Mat,
    scale: f64,
    p_term: Mat,
}

impl QuadProgram {
    /// Validates shapes, `scale > 0`, and that `p_term` lies in the range of the map.
    pub fn new(gram: Mat, scale: f64, p_term: Mat) -> Result<Self> {
        if !gram.is_square() || p_term.cols() != gram.rows() {
            return Err(Error::ShapeMismatch {
                op: "quad program",
                left: gram.shape(),
                right: p_term.shape(),
            });
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "scale",
                value: scale,
                reason: "must be positive and finite",
            });
        }
        let range = &gram * &pinv_sym(&gram, SvdTolerance::default())?;
        let leak = (&p_term - &(&p_term * &range)).frobenius_norm();
        let tolerance = 1e-9 * (1.0 + p_term.frobenius_norm());
        if leak > tolerance {
            return Err(Error::CheckFailed {
                check: "p_term_in_range",
                measured: leak,
                tolerance,
            });
        }
        Ok(QuadProgram {
            gram,
            scale,
            p_term,
        })
    }

    /// `1/2 ||W X - Y||^2`.
    pub fn direct_ft(prob: &TargetProblem) -> Result<Self> {
        let p = prob.y_ft() * &prob.x_img().transpose();
        QuadProgram::new(prob.c_i().clone(), 1.0, p)
    }

    /// `1/2 ||W X - Y||^2 + lambda/2 ||W X - A X||^2` for an anchor `A`.
    pub fn sd_anchor(prob: &TargetProblem, anchor: &Mat, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "lambda",
                value: lambda,
                reason: "must be nonnegative and finite",
            });
        }
        let p = &(prob.y_ft() * &prob.x_img().transpose()) + &(anchor * prob.c_i()).scale(lambda);
        QuadProgram::new(prob.c_i().clone(), 1.0 + lambda, p)
    }

    pub fn static_sd(prob: &TargetProblem, w0: &Mat, lambda: f64) -> Result<Self> {
        Self::sd_anchor(prob, w0, lambda)
    }

    /// `1/2 ||W X - Y||^2 + lambda/2 ||W - W0||^2`; strongly convex for `lambda > 0`.
    pub fn l2sp(prob: &TargetProblem, w0: &Mat, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "lambda",
                value: lambda,
                reason: "must be positive and finite",
            });
        }
        let gram = prob.c_i() + &Mat::identity(prob.d_img()).scale(lambda);
        let p = &(prob.y_ft() * &prob.x_img().transpose()) + &w0.scale(lambda);
        QuadProgram::new(gram, 1.0, p)
    }

    pub fn gram(&self) -> &Mat {
        &self.gram
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn p_term(&self) -> &Mat {
        &self.p_term
    }

    pub fn apply_q(&self, w: &Mat) -> Mat {
        (w * &self.gram).scale(self.scale)
    }

    pub fn gradient(&self, w: &Mat) -> Mat {
        &self.apply_q(w) - &self.p_term
    }

    pub fn objective(&self, w: &Mat) -> f64 {
        let q = self.apply_q(w);
        0.5 * frobenius_inner(w, &q).unwrap_or(f64::NAN)
            - frobenius_inner(&self.p_term, w).unwrap_or(f64::NAN)
    }

    /// `||Q||_op = scale * lambda_max(gram)`.
    pub fn op_norm(&self) -> f64 {
        self.scale * lambda_max_sym(&self.gram)
    }

    /// Projector onto the range of the Gram, i.e. of the Hessian map.
    pub fn range_projector(&self) -> Result<Mat> {
        Ok(&self.gram * &pinv_sym(&self.gram, SvdTolerance::default())?)
    }
}

/// Step size, either fixed or as a fraction of the stability bound `2/||Q||_op`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum StepSize {
    Absolute(f64),
    FractionOfBound(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GdConfig {
    pub step: StepSize,
    pub max_iters: usize,
    /// Stop once `||W_{t+1} - W_t|| < tol (1 + ||W_t||)`.
    pub tol: f64,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig {
            step: StepSize::FractionOfBound(0.9),
            max_iters: 200_000,
            tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GdResult {
    pub w: Mat,
    /// Number of updates actually applied.
    pub iters: usize,
    pub converged: bool,
}

/// Largest recommended step, `0.9 * 2/||Q||_op`. Infinite when the Gram is zero,
/// since the gradient is then identically zero and any step is a no-op.
pub fn max_step(q: &QuadProgram) -> f64 {
    let norm = q.op_norm();
    if norm <= 0.0 {
        f64::INFINITY
    } else {
        0.9 * 2.0 / norm
    }
}

fn resolve_step(q: &QuadProgram, step: StepSize) -> Result<f64> {
    let norm = q.op_norm();
    let bound = if norm > 0.0 {
        2.0 / norm
    } else {
        f64::INFINITY
    };
    let gamma = match step {
        StepSize::Absolute(g) => g,
        StepSize::FractionOfBound(f) if bound.is_finite() => f * bound,
        StepSize::FractionOfBound(f) => f,
    };
    if !(gamma > 0.0 && gamma.is_finite()) || gamma >= bound {
        return Err(Error::StepOutOfBounds { step: gamma, bound });
    }
    Ok(gamma)
}

pub fn gd_solve(q: &QuadProgram, w0: &Mat, cfg: &GdConfig) -> Result<GdResult> {
    gd_solve_observed(q, w0, cfg, |_, _| {})
}

/// Like [`gd_solve`], calling `observe(t, &W_t)` on the initial point and every iterate.
pub fn gd_solve_observed(
    q: &QuadProgram,
    w0: &Mat,
    cfg: &GdConfig,
    mut observe: impl FnMut(usize, &Mat),
) -> Result<GdResult> {
    if w0.cols() != q.gram.rows() || w0.rows() != q.p_term.rows() {
        return Err(Error::ShapeMismatch {
            op: "gd_solve",
            left: w0.shape(),
            right: q.p_term.shape(),
        });
    }
    let gamma = resolve_step(q, cfg.step)?;
    let mut w = w0.clone();
    observe(0, &w);
    for t in 0..cfg.max_iters {
        let delta = q.gradient(&w).scale(gamma);
        if delta.frobenius_norm() < cfg.tol * (1.0 + w.frobenius_norm()) {
            return Ok(GdResult {
                w,
                iters: t,
                converged: true,
            });
        }
        w = &w - &delta;
        if !w.is_finite() {
            return Err(Error::NonFinite { what: "gd iterate" });
        }
        observe(t + 1, &w);
    }
    Ok(GdResult {
        w,
        iters: cfg.max_iters,
        converged: false,
    })
}

/// Runs `iters` raw GD steps with no stability check, for probing divergence.
pub fn gd_probe(q: &QuadProgram, w0: &Mat, step: f64, iters: usize) -> Mat {
    let mut w = w0.clone();
    for _ in 0..iters {
        w = &w - &q.gradient(&w).scale(step);
    }
    w
}

#[derive(Debug, Clone, Serialize)]
pub struct StrategyCheck {
    pub strategy: ClosedFormStrategy,
    pub rel_error: f64,
    pub iters: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct UnifiedReport {
    pub lambda: f64,
    pub checks: Vec<StrategyCheck>,
    pub pass: bool,
}

/// Relative error with a unit floor on the denominator for near-zero references.
pub fn rel_error(got: &Mat, want: &Mat) -> f64 {
    (got - want).frobenius_norm() / want.frobenius_norm().max(1.0)
}

/// Runs GD from `W0` on all three objectives and compares with the closed forms.
pub fn verify_unified_framework(
    inst: &FinetuneInstance,
    lambda: f64,
    cfg: &GdConfig,
) -> Result<UnifiedReport> {
    let prob = TargetProblem::new(inst)?;
    let w0 = inst.w_img0();
    let cases: [(QuadProgram, StrategySolution); 3] = [
        (QuadProgram::direct_ft(&prob)?, solve_direct_ft(&prob, w0)?),
        (
            QuadProgram::l2sp(&prob, w0, lambda)?,
            solve_l2sp(&prob, w0, lambda)?,
        ),
        (
            QuadProgram::static_sd(&prob, w0, lambda)?,
            solve_static_sd(&prob, w0, lambda)?,
        ),
    ];
    let mut checks = Vec::with_capacity(3);
    for (q, sol) in &cases {
        let res = gd_solve(q, w0, cfg)?;
        if !res.converged {
            return Err(Error::NotConverged { iters: res.iters });
        }
        checks.push(StrategyCheck {
            strategy: sol.strategy,
            rel_error: rel_error(&res.w, &sol.weights),
            iters: res.iters,
        });
    }
    let pass = checks.iter().all(|c| c.rel_error < 1e-6);
    Ok(UnifiedReport {
        lambda,
        checks,
        pass,
    })
}
