//! The linearized contrastive objective and its least-squares reformulation.
//!
//! With a frozen text encoder, the contrastive alignment term is a linear
//! functional of `W_I X_I` whose coefficient matrix is the fixed target
//! `Y = W_T X_T (n I - J)`. Adding the quadratic `1/2 ||W_I X_I||^2` turns it
//! into `1/2 ||W_I X_I - Y||^2` up to a constant, which is what every solver
//! in this crate minimizes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{pinv_sym, projector_range, projector_range_via_cov, Mat, SvdTolerance};

/// Problem data of one linearized finetuning task.
#[derive(Debug, Clone)]
pub struct FinetuneInstance {
    x_img: Mat,
    x_txt: Mat,
    w_img0: Mat,
    w_txt0: Mat,
    rho: f64,
}

/// Shape of a [`FinetuneInstance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceDims {
    pub d_img: usize,
    pub d_txt: usize,
    pub p: usize,
    pub n: usize,
}

impl FinetuneInstance {
    pub fn new(x_img: Mat, x_txt: Mat, w_img0: Mat, w_txt0: Mat, rho: f64) -> Result<Self> {
        if x_img.cols() != x_txt.cols() {
            return Err(Error::ShapeMismatch {
                op: "instance: paired columns",
                left: x_img.shape(),
                right: x_txt.shape(),
            });
        }
        if w_img0.cols() != x_img.rows() {
            return Err(Error::ShapeMismatch {
                op: "instance: image encoder",
                left: w_img0.shape(),
                right: x_img.shape(),
            });
        }
        if w_txt0.cols() != x_txt.rows() {
            return Err(Error::ShapeMismatch {
                op: "instance: text encoder",
                left: w_txt0.shape(),
                right: x_txt.shape(),
            });
        }
        if w_img0.rows() != w_txt0.rows() {
            return Err(Error::ShapeMismatch {
                op: "instance: embedding dimension",
                left: w_img0.shape(),
                right: w_txt0.shape(),
            });
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "rho",
                value: rho,
                reason: "must be a nonnegative real",
            });
        }
        Ok(FinetuneInstance {
            x_img,
            x_txt,
            w_img0,
            w_txt0,
            rho,
        })
    }

    /// Gaussian random instance.
    ///
    /// Image features are scaled by `1/sqrt(max(d_img, n))` so the Gram
    /// spectrum stays O(1) and away from zero on its range when `d_img` and
    /// `n` differ by a factor of two or more.
    pub fn random<R: Rng + ?Sized>(dims: InstanceDims, rho: f64, rng: &mut R) -> Result<Self> {
        let InstanceDims { d_img, d_txt, p, n } = dims;
        if d_img == 0 || d_txt == 0 || p == 0 || n == 0 {
            return Err(Error::InvalidDimensions {
                what: "instance",
                detail: format!("{dims:?}"),
            });
        }
        let mut gauss = |r: usize, c: usize, s: f64| {
            Mat::from_fn(r, c, |_, _| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                s * z
            })
        };
        let x_img = gauss(d_img, n, 1.0 / (d_img.max(n) as f64).sqrt());
        let x_txt = gauss(d_txt, n, 1.0);
        let w_img0 = gauss(p, d_img, 1.0);
        let w_txt0 = gauss(p, d_txt, 1.0 / (d_txt as f64).sqrt());
        FinetuneInstance::new(x_img, x_txt, w_img0, w_txt0, rho)
    }

    pub fn x_img(&self) -> &Mat {
        &self.x_img
    }

    pub fn x_txt(&self) -> &Mat {
        &self.x_txt
    }

    pub fn w_img0(&self) -> &Mat {
        &self.w_img0
    }

    pub fn w_txt0(&self) -> &Mat {
        &self.w_txt0
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn n(&self) -> usize {
        self.x_img.cols()
    }

    pub fn dims(&self) -> InstanceDims {
        InstanceDims {
            d_img: self.x_img.rows(),
            d_txt: self.x_txt.rows(),
            p: self.w_img0.rows(),
            n: self.n(),
        }
    }

    /// Replaces the pretrained image encoder, keeping the data.
    pub fn with_w_img0(&self, w_img0: Mat) -> Result<Self> {
        FinetuneInstance::new(
            self.x_img.clone(),
            self.x_txt.clone(),
            w_img0,
            self.w_txt0.clone(),
            self.rho,
        )
    }
}

/// `n I_n - J_n`.
pub fn centering_operator(n: usize) -> Mat {
    Mat::from_fn(n, n, |i, j| if i == j { n as f64 - 1.0 } else { -1.0 })
}

/// Contrastive target `Y = W_T X_T (n I - J)`. Independent of the image encoder.
pub fn contrastive_target(inst: &FinetuneInstance) -> Mat {
    let h_txt = inst.w_txt0() * inst.x_txt();
    &h_txt * &centering_operator(inst.n())
}

/// Similarity matrix `S = (W_I X_I)^T (W_T X_T)`.
pub fn similarity_matrix(w_img: &Mat, w_txt: &Mat, x_img: &Mat, x_txt: &Mat) -> Result<Mat> {
    let h_img = w_img.try_mul(x_img)?;
    let h_txt = w_txt.try_mul(x_txt)?;
    if h_img.rows() != h_txt.rows() || h_img.cols() != h_txt.cols() {
        return Err(Error::ShapeMismatch {
            op: "similarity_matrix",
            left: h_img.shape(),
            right: h_txt.shape(),
        });
    }
    h_img.transpose().try_mul(&h_txt)
}

/// Contrastive alignment term `1^T S 1 - n Tr(S)`.
pub fn l_cl(s: &Mat) -> Result<f64> {
    if !s.is_square() {
        return Err(Error::InvalidDimensions {
            what: "similarity matrix",
            detail: format!("expected square, got {:?}", s.shape()),
        });
    }
    Ok(s.sum() - s.rows() as f64 * s.trace())
}

/// Linearized MMCL loss with the cross-Frobenius term, text encoder frozen.
pub fn mmcl_loss(inst: &FinetuneInstance, w_img: &Mat) -> Result<f64> {
    let n = inst.n();
    if n < 2 {
        return Err(Error::InvalidDimensions {
            what: "mmcl batch",
            detail: format!("n = {n}, need n >= 2"),
        });
    }
    let s = similarity_matrix(w_img, inst.w_txt0(), inst.x_img(), inst.x_txt())?;
    let cross = w_img.transpose().try_mul(inst.w_txt0())?;
    let nf = n as f64;
    Ok(l_cl(&s)? / (nf * (nf - 1.0)) + 0.5 * inst.rho() * cross.frobenius_norm_sq())
}

/// Cached quantities of the least-squares problem `min 1/2 ||W X - Y||^2`.
#[derive(Debug, Clone)]
pub struct TargetProblem {
    x_img: Mat,
    y_ft: Mat,
    p_i: Mat,
    c_i: Mat,
    c_i_pinv: Mat,
    w_star: Mat,
}

impl TargetProblem {
    pub fn new(inst: &FinetuneInstance) -> Result<Self> {
        Self::from_target(inst.x_img().clone(), contrastive_target(inst))
    }

    /// Builds the problem from features and an arbitrary target.
    pub fn from_target(x_img: Mat, y_ft: Mat) -> Result<Self> {
        Self::from_target_with(x_img, y_ft, SvdTolerance::default())
    }

    pub fn from_target_with(x_img: Mat, y_ft: Mat, tol: SvdTolerance) -> Result<Self> {
        if x_img.cols() != y_ft.cols() {
            return Err(Error::ShapeMismatch {
                op: "target problem",
                left: x_img.shape(),
                right: y_ft.shape(),
            });
        }
        let c_i = &x_img * &x_img.transpose();
        let c_i_pinv = pinv_sym(&c_i, tol)?;
        // Both routes are the same projector; take the smaller Gram.
        let p_i = if x_img.cols() <= x_img.rows() {
            projector_range(&x_img, tol)?
        } else {
            projector_range_via_cov(&x_img, tol)?
        };
        let w_star = &(&y_ft * &x_img.transpose()) * &c_i_pinv;
        Ok(TargetProblem {
            x_img,
            y_ft,
            p_i,
            c_i,
            c_i_pinv,
            w_star,
        })
    }

    pub fn x_img(&self) -> &Mat {
        &self.x_img
    }

    pub fn y_ft(&self) -> &Mat {
        &self.y_ft
    }

    /// Projector onto the task subspace `range(X_I)`.
    pub fn p_i(&self) -> &Mat {
        &self.p_i
    }

    /// `I - P_I`.
    pub fn p_perp(&self) -> Mat {
        &Mat::identity(self.d_img()) - &self.p_i
    }

    pub fn c_i(&self) -> &Mat {
        &self.c_i
    }

    pub fn c_i_pinv(&self) -> &Mat {
        &self.c_i_pinv
    }

    /// Minimum-norm task solution `Y X^T (X X^T)^+`.
    pub fn w_star(&self) -> &Mat {
        &self.w_star
    }

    pub fn d_img(&self) -> usize {
        self.x_img.rows()
    }

    pub fn p(&self) -> usize {
        self.y_ft.rows()
    }

    pub fn n(&self) -> usize {
        self.x_img.cols()
    }

    fn check_weights(&self, w: &Mat) -> Result<()> {
        if w.shape() != (self.p(), self.d_img()) {
            return Err(Error::ShapeMismatch {
                op: "weights vs problem",
                left: w.shape(),
                right: (self.p(), self.d_img()),
            });
        }
        Ok(())
    }

    /// `1/2 ||W X - Y||_F^2`.
    pub fn ls_objective(&self, w: &Mat) -> Result<f64> {
        self.check_weights(w)?;
        Ok(0.5 * (&(w * &self.x_img) - &self.y_ft).frobenius_norm_sq())
    }

    /// `(W X - Y) X^T`.
    pub fn ls_gradient(&self, w: &Mat) -> Result<Mat> {
        self.check_weights(w)?;
        Ok(&(&(w * &self.x_img) - &self.y_ft) * &self.x_img.transpose())
    }
}

/// Both sides of `1/2||WX - Y||^2 = 1/2||WX||^2 - Tr(Y^T W X) + 1/2||Y||^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceIdentityReport {
    pub lhs: f64,
    pub rhs: f64,
    /// The data-dependent quadratic `1/2 ||W X||^2`.
    pub quad_term: f64,
    /// `1^T S 1 - n Tr(S)` from the similarity matrix.
    pub l_cl: f64,
    /// `-Tr(Y^T W X)`; equals `l_cl` exactly in exact arithmetic.
    pub neg_trace: f64,
}

impl TraceIdentityReport {
    pub fn identity_error(&self) -> f64 {
        (self.lhs - self.rhs).abs() / (1.0 + self.lhs.abs())
    }

    pub fn trace_error(&self) -> f64 {
        (self.l_cl - self.neg_trace).abs() / (1.0 + self.l_cl.abs())
    }
}

pub fn trace_identity_check(inst: &FinetuneInstance, w_img: &Mat) -> Result<TraceIdentityReport> {
    let y = contrastive_target(inst);
    let h = w_img.try_mul(inst.x_img())?;
    if h.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "trace_identity_check",
            left: h.shape(),
            right: y.shape(),
        });
    }
    let lhs = 0.5 * (&h - &y).frobenius_norm_sq();
    let quad_term = 0.5 * h.frobenius_norm_sq();
    let tr = (&y.transpose() * &h).trace();
    let rhs = quad_term - tr + 0.5 * y.frobenius_norm_sq();
    let s = similarity_matrix(w_img, inst.w_txt0(), inst.x_img(), inst.x_txt())?;
    Ok(TraceIdentityReport {
        lhs,
        rhs,
        quad_term,
        l_cl: l_cl(&s)?,
        neg_trace: -tr,
    })
}
