//! Closed-form minimizers of the three regularized finetuning objectives.
//!
//! All three share the orthogonal piece `W0 (I - P)`: the data never sees
//! directions outside the task subspace, so only the parallel piece moves.
//! Direct finetuning replaces it by `W*`, static self-distillation moves it a
//! fraction `1/(1+lambda)` of the way, and L2 anchoring couples both pieces
//! through `(C + lambda I)^{-1}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::Mat;
use crate::objective::TargetProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClosedFormStrategy {
    DirectFT,
    L2SP,
    StaticSD,
}

/// A solved weight matrix together with its split across the task subspace.
#[derive(Debug, Clone)]
pub struct StrategySolution {
    pub weights: Mat,
    pub strategy: ClosedFormStrategy,
    pub lambda: f64,
    pub parallel: Mat,
    pub orthogonal: Mat,
}

impl StrategySolution {
    fn build(weights: Mat, strategy: ClosedFormStrategy, lambda: f64, p_i: &Mat) -> Self {
        let (parallel, orthogonal) = decompose(&weights, p_i);
        StrategySolution {
            weights,
            strategy,
            lambda,
            parallel,
            orthogonal,
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "lambda",
            value: lambda,
            reason: "must be positive and finite",
        })
    }
}

fn check_w0(prob: &TargetProblem, w0: &Mat) -> Result<()> {
    if w0.shape() != (prob.p(), prob.d_img()) {
        return Err(Error::ShapeMismatch {
            op: "pretrained weights vs problem",
            left: w0.shape(),
            right: (prob.p(), prob.d_img()),
        });
    }
    Ok(())
}

pub fn min_norm_task_solution(prob: &TargetProblem) -> Mat {
    prob.w_star().clone()
}

/// `W P` and `W (I - P)`.
pub fn decompose(w: &Mat, p_i: &Mat) -> (Mat, Mat) {
    let parallel = w * p_i;
    let orthogonal = w - &parallel;
    (parallel, orthogonal)
}

/// `W0 (I - P) + W*`.
pub fn solve_direct_ft(prob: &TargetProblem, w0: &Mat) -> Result<StrategySolution> {
    check_w0(prob, w0)?;
    let w = &(w0 - &(w0 * prob.p_i())) + prob.w_star();
    Ok(StrategySolution::build(
        w,
        ClosedFormStrategy::DirectFT,
        0.0,
        prob.p_i(),
    ))
}

/// `(Y X^T + lambda W0)(C + lambda I)^{-1}` via a Cholesky solve.
pub fn solve_l2sp(prob: &TargetProblem, w0: &Mat, lambda: f64) -> Result<StrategySolution> {
    check_lambda(lambda)?;
    check_w0(prob, w0)?;
    let d = prob.d_img();
    let a = prob.c_i() + &Mat::identity(d).scale(lambda);
    let b = &(prob.y_ft() * &prob.x_img().transpose()) + &w0.scale(lambda);
    let w = a.solve_spd_right(&b)?;
    Ok(StrategySolution::build(
        w,
        ClosedFormStrategy::L2SP,
        lambda,
        prob.p_i(),
    ))
}

/// `W0 (I - P) + lambda/(1+lambda) W0 P + 1/(1+lambda) W*`.
pub fn solve_static_sd(prob: &TargetProblem, w0: &Mat, lambda: f64) -> Result<StrategySolution> {
    check_lambda(lambda)?;
    check_w0(prob, w0)?;
    let w0p = w0 * prob.p_i();
    let keep = lambda / (1.0 + lambda);
    let w = &(&(w0 - &w0p) + &w0p.scale(keep)) + &prob.w_star().scale(1.0 / (1.0 + lambda));
    Ok(StrategySolution::build(
        w,
        ClosedFormStrategy::StaticSD,
        lambda,
        prob.p_i(),
    ))
}

/// Offset of the static self-distillation solution from `W*` inside the task
/// subspace, cross-checked against `lambda/(1+lambda) (W0 P - W*)`.
pub fn anchor_bias(prob: &TargetProblem, w0: &Mat, lambda: f64) -> Result<Mat> {
    let sd = solve_static_sd(prob, w0, lambda)?;
    let bias = &(&sd.weights - prob.w_star()) * prob.p_i();
    let predicted = (&(w0 * prob.p_i()) - prob.w_star()).scale(lambda / (1.0 + lambda));
    let err = (&bias - &predicted).frobenius_norm();
    let scale = 1.0 + w0.frobenius_norm() + prob.w_star().frobenius_norm();
    let tolerance = 1e-10 * scale;
    if err > tolerance {
        return Err(Error::CheckFailed {
            check: "anchor_bias",
            measured: err,
            tolerance,
        });
    }
    Ok(bias)
}

/// `1/2 ||W X - Y||^2 + lambda/2 ||W - W0||^2`.
pub fn l2sp_objective(prob: &TargetProblem, w: &Mat, w0: &Mat, lambda: f64) -> Result<f64> {
    Ok(prob.ls_objective(w)? + 0.5 * lambda * (w - w0).frobenius_norm_sq())
}

pub fn l2sp_gradient(prob: &TargetProblem, w: &Mat, w0: &Mat, lambda: f64) -> Result<Mat> {
    Ok(&prob.ls_gradient(w)? + &(w - w0).scale(lambda))
}

/// `1/2 ||W X - Y||^2 + lambda/2 ||W X - W0 X||^2`: the teacher's outputs on
/// the finetuning inputs act as a second regression target.
pub fn static_sd_objective(prob: &TargetProblem, w: &Mat, w0: &Mat, lambda: f64) -> Result<f64> {
    check_w0(prob, w0)?;
    let drift = &(w - w0) * prob.x_img();
    Ok(prob.ls_objective(w)? + 0.5 * lambda * drift.frobenius_norm_sq())
}

pub fn static_sd_gradient(prob: &TargetProblem, w: &Mat, w0: &Mat, lambda: f64) -> Result<Mat> {
    check_w0(prob, w0)?;
    Ok(&prob.ls_gradient(w)? + &(&(w - w0) * prob.c_i()).scale(lambda))
}

/// Gradient of the objective that `sol` claims to minimize.
pub fn stationarity_gradient(
    prob: &TargetProblem,
    sol: &StrategySolution,
    w0: &Mat,
) -> Result<Mat> {
    match sol.strategy {
        ClosedFormStrategy::DirectFT => prob.ls_gradient(&sol.weights),
        ClosedFormStrategy::L2SP => l2sp_gradient(prob, &sol.weights, w0, sol.lambda),
        ClosedFormStrategy::StaticSD => static_sd_gradient(prob, &sol.weights, w0, sol.lambda),
    }
}
