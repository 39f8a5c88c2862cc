//! Self-distillation losses between student and teacher embedding batches.
//!
//! Four views of the same teacher: feature distance (FD), relational KL on
//! the in-batch similarity softmaxes (CRD), InfoNCE between student anchors
//! and teacher keys (ICL), and KL from the teacher's own similarity rows to
//! the student-to-teacher cross rows (Cross-KD). Every loss comes with its
//! analytic gradient with respect to the student embeddings.
//!
//! Rows of the `N x p` matrices are embeddings. Logits are `h_i . h_j / tau`
//! and every softmax subtracts its row maximum first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::Mat;

/// Paired image and text embeddings, one pair per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    img: Mat,
    txt: Mat,
    normalized: bool,
}

impl EmbeddingBatch {
    pub fn new(img: Mat, txt: Mat) -> Result<Self> {
        if img.shape() != txt.shape() {
            return Err(Error::ShapeMismatch {
                op: "embedding batch",
                left: img.shape(),
                right: txt.shape(),
            });
        }
        Ok(EmbeddingBatch {
            img,
            txt,
            normalized: false,
        })
    }

    pub fn img(&self) -> &Mat {
        &self.img
    }

    pub fn txt(&self) -> &Mat {
        &self.txt
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.img.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.img.cols()
    }

    /// Copy with unit-norm rows. Zero rows cannot be normalized.
    pub fn normalized(&self) -> Result<Self> {
        if self.normalized {
            return Ok(self.clone());
        }
        Ok(EmbeddingBatch {
            img: normalize_rows(&self.img)?,
            txt: normalize_rows(&self.txt)?,
            normalized: true,
        })
    }
}

fn row_norms(m: &Mat) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn normalize_rows(m: &Mat) -> Result<Mat> {
    let norms = row_norms(m);
    if norms.iter().any(|&n| !(n > 0.0 && n.is_finite())) {
        return Err(Error::NonFinite {
            what: "embedding row norm",
        });
    }
    Ok(Mat::from_fn(m.rows(), m.cols(), |i, j| {
        m.get(i, j) / norms[i]
    }))
}

/// Pulls a gradient taken at `r/||r||` back to the raw rows `r`.
fn normalize_rows_backward(raw: &Mat, grad: &Mat) -> Mat {
    let norms = row_norms(raw);
    let mut out = Mat::zeros(raw.rows(), raw.cols());
    for (i, &n) in norms.iter().enumerate() {
        let dot: f64 = (0..raw.cols())
            .map(|j| grad.get(i, j) * raw.get(i, j) / n)
            .sum();
        for j in 0..raw.cols() {
            out.set(i, j, (grad.get(i, j) - dot * raw.get(i, j) / n) / n);
        }
    }
    out
}

/// Per-component weights of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentWeights {
    pub fd: f64,
    pub crd: f64,
    pub icl: f64,
    pub crosskd: f64,
}

impl ComponentWeights {
    pub const ALL: ComponentWeights = ComponentWeights {
        fd: 1.0,
        crd: 1.0,
        icl: 1.0,
        crosskd: 1.0,
    };

    pub const NONE: ComponentWeights = ComponentWeights {
        fd: 0.0,
        crd: 0.0,
        icl: 0.0,
        crosskd: 0.0,
    };
}

impl Default for ComponentWeights {
    fn default() -> Self {
        ComponentWeights::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub tau: f64,
    pub weights: ComponentWeights,
    /// Outer coefficient of the distillation term in the total loss.
    pub lambda_sd: f64,
    /// Normalize both batches before the composite loss.
    pub normalize: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 1.0,
            weights: ComponentWeights::ALL,
            lambda_sd: 1.0,
            normalize: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "tau",
                value: self.tau,
                reason: "must be positive",
            });
        }
        let w = self.weights;
        for (name, v) in [
            ("w_fd", w.fd),
            ("w_crd", w.crd),
            ("w_icl", w.icl),
            ("w_crosskd", w.crosskd),
            ("lambda_sd", self.lambda_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter {
                    name,
                    value: v,
                    reason: "must be nonnegative",
                });
            }
        }
        Ok(())
    }
}

/// Gradient with respect to the student's image and text rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentGrad {
    pub img: Mat,
    pub txt: Mat,
}

impl StudentGrad {
    fn zeros(n: usize, p: usize) -> Self {
        StudentGrad {
            img: Mat::zeros(n, p),
            txt: Mat::zeros(n, p),
        }
    }

    fn axpy(&mut self, a: f64, other: &StudentGrad) {
        self.img = &self.img + &other.img.scale(a);
        self.txt = &self.txt + &other.txt.scale(a);
    }
}

fn check_pair(teacher: &EmbeddingBatch, student: &EmbeddingBatch) -> Result<()> {
    if teacher.img.shape() != student.img.shape() {
        return Err(Error::ShapeMismatch {
            op: "teacher vs student batch",
            left: teacher.img.shape(),
            right: student.img.shape(),
        });
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    DistillConfig {
        tau,
        ..DistillConfig::default()
    }
    .validate()
}

/// `a b^T / tau`.
fn logits(a: &Mat, b: &Mat, tau: f64) -> Mat {
    (a * &b.transpose()).scale(1.0 / tau)
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows(z: &Mat) -> Mat {
    let mut out = Mat::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let row = z.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (j, v) in row.iter().enumerate() {
            out.set(i, j, v - lse);
        }
    }
    out
}

pub fn softmax_rows(z: &Mat) -> Mat {
    let ls = log_softmax_rows(z);
    Mat::from_fn(z.rows(), z.cols(), |i, j| ls.get(i, j).exp())
}

/// `sum_i KL(p_i || q_i)` over rows given as log-probabilities, with `0 log 0 = 0`.
fn kl_rows(log_p: &Mat, log_q: &Mat) -> f64 {
    let mut acc = 0.0;
    for i in 0..log_p.rows() {
        for j in 0..log_p.cols() {
            let p = log_p.get(i, j).exp();
            if p > 0.0 {
                acc += p * (log_p.get(i, j) - log_q.get(i, j));
            }
        }
    }
    acc
}

fn diag_sum(m: &Mat) -> f64 {
    (0..m.rows().min(m.cols())).map(|i| m.get(i, i)).sum()
}

/// `(1/N) sum_i (||hI_T - hI_S||^2 + ||hT_T - hT_S||^2)`.
pub fn fd_loss(teacher: &EmbeddingBatch, student: &EmbeddingBatch) -> Result<f64> {
    check_pair(teacher, student)?;
    let n = teacher.len() as f64;
    Ok(((&teacher.img - &student.img).frobenius_norm_sq()
        + (&teacher.txt - &student.txt).frobenius_norm_sq())
        / n)
}

pub fn fd_grad(teacher: &EmbeddingBatch, student: &EmbeddingBatch) -> Result<StudentGrad> {
    check_pair(teacher, student)?;
    let c = 2.0 / teacher.len() as f64;
    Ok(StudentGrad {
        img: (&student.img - &teacher.img).scale(c),
        txt: (&student.txt - &teacher.txt).scale(c),
    })
}

/// `(1/N) sum_i [KL(p_i^T || p_i^S) + KL(q_i^T || q_i^S)]` where `p` are the
/// image-to-text and `q` the text-to-image similarity softmaxes of each model.
pub fn crd_loss(teacher: &EmbeddingBatch, student: &EmbeddingBatch, tau: f64) -> Result<f64> {
    check_pair(teacher, student)?;
    check_tau(tau)?;
    let a_t = logits(&teacher.img, &teacher.txt, tau);
    let a_s = logits(&student.img, &student.txt, tau);
    let kl_p = kl_rows(&log_softmax_rows(&a_t), &log_softmax_rows(&a_s));
    let kl_q = kl_rows(
        &log_softmax_rows(&a_t.transpose()),
        &log_softmax_rows(&a_s.transpose()),
    );
    Ok((kl_p + kl_q) / teacher.len() as f64)
}

pub fn crd_grad(
    teacher: &EmbeddingBatch,
    student: &EmbeddingBatch,
    tau: f64,
) -> Result<StudentGrad> {
    check_pair(teacher, student)?;
    check_tau(tau)?;
    let n = teacher.len() as f64;
    let a_t = logits(&teacher.img, &teacher.txt, tau);
    let a_s = logits(&student.img, &student.txt, tau);
    let dp = &softmax_rows(&a_s) - &softmax_rows(&a_t);
    let dq = &softmax_rows(&a_s.transpose()) - &softmax_rows(&a_t.transpose());
    // dL/dA_S, with the text-to-image logits being A_S^T
    let g = (&dp + &dq.transpose()).scale(1.0 / n);
    Ok(StudentGrad {
        img: (&g * &student.txt).scale(1.0 / tau),
        txt: (&g.transpose() * &student.img).scale(1.0 / tau),
    })
}

/// `-(1/2N) sum_i [log softmax(hI_S . hT_T / tau)_ii + log softmax(hT_S . hI_T / tau)_ii]`.
pub fn icl_loss(teacher: &EmbeddingBatch, student: &EmbeddingBatch, tau: f64) -> Result<f64> {
    check_pair(teacher, student)?;
    check_tau(tau)?;
    let a = logits(&student.img, &teacher.txt, tau);
    let b = logits(&student.txt, &teacher.img, tau);
    let n = teacher.len() as f64;
    Ok(-(diag_sum(&log_softmax_rows(&a)) + diag_sum(&log_softmax_rows(&b))) / (2.0 * n))
}

pub fn icl_grad(
    teacher: &EmbeddingBatch,
    student: &EmbeddingBatch,
    tau: f64,
) -> Result<StudentGrad> {
    check_pair(teacher, student)?;
    check_tau(tau)?;
    let n = teacher.len();
    let eye = Mat::identity(n);
    let c = 1.0 / (2.0 * n as f64 * tau);
    let da = &softmax_rows(&logits(&student.img, &teacher.txt, tau)) - &eye;
    let db = &softmax_rows(&logits(&student.txt, &teacher.img, tau)) - &eye;
    Ok(StudentGrad {
        img: (&da * &teacher.txt).scale(c),
        txt: (&db * &teacher.img).scale(c),
    })
}

/// `(1/2N) sum_i [KL(p_i^T || p_i^{S->T}) + KL(q_i^T || q_i^{S->T})]`, teacher
/// self-modal rows against student-anchor, teacher-key rows.
pub fn crosskd_loss(teacher: &EmbeddingBatch, student: &EmbeddingBatch, tau: f64) -> Result<f64> {
    check_pair(teacher, student)?;
    check_tau(tau)?;
    let a_t = logits(&teacher.img, &teacher.txt, tau);
    let a_x = logits(&student.img, &teacher.txt, tau);
    let b_x = logits(&student.txt, &teacher.img, tau);
    let kl_p = kl_rows(&log_softmax_rows(&a_t), &log_softmax_rows(&a_x));
    let kl_q = kl_rows(&log_softmax_rows(&a_t.transpose()), &log_softmax_rows(&b_x));
    Ok((kl_p + kl_q) / (2.0 * teacher.len() as f64))
}

pub fn crosskd_grad(
    teacher: &EmbeddingBatch,
    student: &EmbeddingBatch,
    tau: f64,
) -> Result<StudentGrad> {
    check_pair(teacher, student)?;
    check_tau(tau)?;
    let a_t = logits(&teacher.img, &teacher.txt, tau);
    let c = 1.0 / (2.0 * teacher.len() as f64 * tau);
    let da = &softmax_rows(&logits(&student.img, &teacher.txt, tau)) - &softmax_rows(&a_t);
    let db =
        &softmax_rows(&logits(&student.txt, &teacher.img, tau)) - &softmax_rows(&a_t.transpose());
    Ok(StudentGrad {
        img: (&da * &teacher.txt).scale(c),
        txt: (&db * &teacher.img).scale(c),
    })
}

/// Symmetric InfoNCE of one batch against itself.
pub fn symmetric_info_nce(batch: &EmbeddingBatch, tau: f64) -> Result<f64> {
    icl_loss(batch, batch, tau)
}

/// Values of the four components and their weighted sum, before `lambda_sd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompositeBreakdown {
    pub fd: f64,
    pub crd: f64,
    pub icl: f64,
    pub crosskd: f64,
    pub total: f64,
}

fn prepare(
    teacher: &EmbeddingBatch,
    student: &EmbeddingBatch,
    cfg: &DistillConfig,
) -> Result<(EmbeddingBatch, EmbeddingBatch)> {
    cfg.validate()?;
    check_pair(teacher, student)?;
    if cfg.normalize {
        Ok((teacher.normalized()?, student.normalized()?))
    } else {
        Ok((teacher.clone(), student.clone()))
    }
}

pub fn composite_breakdown(
    teacher: &EmbeddingBatch,
    student: &EmbeddingBatch,
    cfg: &DistillConfig,
) -> Result<CompositeBreakdown> {
    let (t, s) = prepare(teacher, student, cfg)?;
    let w = cfg.weights;
    let fd = fd_loss(&t, &s)?;
    let crd = crd_loss(&t, &s, cfg.tau)?;
    let icl = icl_loss(&t, &s, cfg.tau)?;
    let crosskd = crosskd_loss(&t, &s, cfg.tau)?;
    Ok(CompositeBreakdown {
        fd,
        crd,
        icl,
        crosskd,
        total: w.fd * fd + w.crd * crd + w.icl * icl + w.crosskd * crosskd,
    })
}

/// `w_fd FD + w_crd CRD + w_icl ICL + w_crosskd CrossKD`. Components with
/// zero weight are skipped entirely.
pub fn composite_sd_loss(
    teacher: &EmbeddingBatch,
    student: &EmbeddingBatch,
    cfg: &DistillConfig,
) -> Result<f64> {
    let (t, s) = prepare(teacher, student, cfg)?;
    let w = cfg.weights;
    let mut total = 0.0;
    if w.fd != 0.0 {
        total += w.fd * fd_loss(&t, &s)?;
    }
    if w.crd != 0.0 {
        total += w.crd * crd_loss(&t, &s, cfg.tau)?;
    }
    if w.icl != 0.0 {
        total += w.icl * icl_loss(&t, &s, cfg.tau)?;
    }
    if w.crosskd != 0.0 {
        total += w.crosskd * crosskd_loss(&t, &s, cfg.tau)?;
    }
    Ok(total)
}

/// Gradient of [`composite_sd_loss`] with respect to the raw student rows.
pub fn composite_sd_grad(
    teacher: &EmbeddingBatch,
    student: &EmbeddingBatch,
    cfg: &DistillConfig,
) -> Result<StudentGrad> {
    let (t, s) = prepare(teacher, student, cfg)?;
    let w = cfg.weights;
    let mut g = StudentGrad::zeros(s.len(), s.dim());
    if w.fd != 0.0 {
        g.axpy(w.fd, &fd_grad(&t, &s)?);
    }
    if w.crd != 0.0 {
        g.axpy(w.crd, &crd_grad(&t, &s, cfg.tau)?);
    }
    if w.icl != 0.0 {
        g.axpy(w.icl, &icl_grad(&t, &s, cfg.tau)?);
    }
    if w.crosskd != 0.0 {
        g.axpy(w.crosskd, &crosskd_grad(&t, &s, cfg.tau)?);
    }
    if cfg.normalize && !student.is_normalized() {
        g = StudentGrad {
            img: normalize_rows_backward(&student.img, &g.img),
            txt: normalize_rows_backward(&student.txt, &g.txt),
        };
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub step: f64,
    pub coords: usize,
}

/// Step of the five-point stencil. Its truncation error grows like
/// `h^4 / tau^5`, so sharper softmaxes need a smaller step.
fn fd_step(tau: f64) -> f64 {
    if tau >= 0.5 {
        1e-3
    } else {
        1e-4
    }
}

/// Compares [`composite_sd_grad`] with fourth-order central differences on random
/// Gaussian teacher and student batches drawn from `seed`.
pub fn distill_grad_check(
    cfg: &DistillConfig,
    batch_size: usize,
    dim: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if batch_size < 2 || dim < 2 {
        return Err(Error::InvalidDimensions {
            what: "gradient check batch",
            detail: format!("need N >= 2 and p >= 2, got N = {batch_size}, p = {dim}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = || {
        Mat::from_fn(batch_size, dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        })
    };
    let teacher = EmbeddingBatch::new(gauss(), gauss())?;
    let student = EmbeddingBatch::new(gauss(), gauss())?;
    grad_check_on(&teacher, &student, cfg)
}

pub fn grad_check_on(
    teacher: &EmbeddingBatch,
    student: &EmbeddingBatch,
    cfg: &DistillConfig,
) -> Result<GradCheckReport> {
    let analytic = composite_sd_grad(teacher, student, cfg)?;
    let h = fd_step(cfg.tau);
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut coords = 0;
    for which in 0..2 {
        let base = if which == 0 {
            &student.img
        } else {
            &student.txt
        };
        let grad = if which == 0 {
            &analytic.img
        } else {
            &analytic.txt
        };
        for i in 0..base.rows() {
            for j in 0..base.cols() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut m = base.clone();
                    m.set(i, j, base.get(i, j) + delta);
                    let s = if which == 0 {
                        EmbeddingBatch::new(m, student.txt.clone())?
                    } else {
                        EmbeddingBatch::new(student.img.clone(), m)?
                    };
                    composite_sd_loss(teacher, &s, cfg)
                };
                let fd = (8.0 * (eval(h)? - eval(-h)?) - (eval(2.0 * h)? - eval(-2.0 * h)?))
                    / (12.0 * h);
                let an = grad.get(i, j);
                let abs = (fd - an).abs();
                max_abs = max_abs.max(abs);
                max_rel = max_rel.max(abs / an.abs().max(fd.abs()).max(1e-6));
                coords += 1;
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        step: h,
        coords,
    })
}
