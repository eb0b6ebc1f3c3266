//! Per-sample losses and their gradients with respect to the logit window.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::linalg::{log_softmax_unchecked, softmax_unchecked};

/// The objective minimised by [`crate::model::grad_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    /// Cross-entropy against `(1 − α)·onehot + α/C`.
    CrossEntropy { smoothing: f64 },
    /// `−(1 − p_t)^γ log p_t`.
    Focal { gamma: f64 },
    /// Cross-entropy against an arbitrary target distribution (mixup).
    SoftCrossEntropy,
    /// `T_tcr·T_stu·KL(σ(z_tcr/T_tcr) ‖ σ(z_stu/T_stu))`.
    Distill { t_teacher: f64, t_student: f64 },
}

impl Objective {
    pub(crate) fn validate(&self) -> Result<()> {
        match *self {
            Objective::CrossEntropy { smoothing } if !(0.0..=1.0).contains(&smoothing) => domain(
                format!("label smoothing must lie in [0, 1], got {smoothing}"),
            ),
            Objective::Focal { gamma } if !(gamma >= 0.0) => {
                domain(format!("focal gamma must be >= 0, got {gamma}"))
            }
            Objective::Distill {
                t_teacher,
                t_student,
            } if !(t_teacher > 0.0 && t_student > 0.0) => {
                domain("distillation temperatures must be positive")
            }
            _ => Ok(()),
        }
    }
}

fn check_class(logits: &[f64], target: usize) -> Result<()> {
    if target >= logits.len() {
        return domain(format!(
            "class index {target} out of range for {} logits",
            logits.len()
        ));
    }
    Ok(())
}

/// Label-smoothed cross-entropy and its logit gradient.
pub(crate) fn ce_with_grad(logits: &[f64], target: usize, alpha: f64) -> (f64, Vec<f64>) {
    let c = logits.len() as f64;
    let logp = log_softmax_unchecked(logits, 1.0);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (k, lp) in logp.iter().enumerate() {
        let q = if k == target {
            1.0 - alpha + alpha / c
        } else {
            alpha / c
        };
        loss -= q * lp;
        grad.push(lp.exp() - q);
    }
    (loss, grad)
}

pub(crate) fn soft_ce_with_grad(logits: &[f64], q: &[f64]) -> (f64, Vec<f64>) {
    let logp = log_softmax_unchecked(logits, 1.0);
    let loss = -q.iter().zip(&logp).map(|(qi, lp)| qi * lp).sum::<f64>();
    let grad = logp.iter().zip(q).map(|(lp, qi)| lp.exp() - qi).collect();
    (loss, grad)
}

pub(crate) fn focal_with_grad(logits: &[f64], target: usize, gamma: f64) -> (f64, Vec<f64>) {
    let logp = log_softmax_unchecked(logits, 1.0);
    let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let lpt = logp[target];
    let pt = p[target];
    // 1 − p_t summed from the other classes keeps precision near p_t → 1.
    let one_minus: f64 = p
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != target)
        .map(|(_, v)| v)
        .sum();
    let w = one_minus.powf(gamma);
    let loss = -w * lpt;
    // dL/dz_j = [γ(1−p)^{γ−1} p log p − (1−p)^γ](δ_jt − p_j)
    let lead = if one_minus > 0.0 && gamma > 0.0 {
        gamma * one_minus.powf(gamma - 1.0) * pt * lpt
    } else {
        0.0
    };
    let coef = lead - w;
    let grad = p
        .iter()
        .enumerate()
        .map(|(j, pj)| coef * (if j == target { 1.0 } else { 0.0 } - pj))
        .collect();
    (loss, grad)
}

pub(crate) fn kd_with_grad(
    teacher: &[f64],
    student: &[f64],
    t_tcr: f64,
    t_stu: f64,
) -> (f64, Vec<f64>) {
    let lt = log_softmax_unchecked(teacher, t_tcr);
    let ls = log_softmax_unchecked(student, t_stu);
    let kl: f64 = lt
        .iter()
        .zip(&ls)
        .map(|(a, b)| {
            if a.exp() > 0.0 {
                a.exp() * (a - b)
            } else {
                0.0
            }
        })
        .sum();
    let grad = lt
        .iter()
        .zip(&ls)
        .map(|(a, b)| t_tcr * (b.exp() - a.exp()))
        .collect();
    (t_tcr * t_stu * kl.max(0.0), grad)
}

/// `−Σ_c q_c log softmax(logits)_c` with `q = (1 − α)·onehot(target) + α/C`.
pub fn ce_loss(logits: &[f64], target: usize, alpha: f64) -> Result<f64> {
    check_class(logits, target)?;
    Objective::CrossEntropy { smoothing: alpha }.validate()?;
    Ok(ce_with_grad(logits, target, alpha).0)
}

/// Focal loss `−(1 − p_t)^γ log p_t`.
pub fn focal_loss(logits: &[f64], target: usize, gamma: f64) -> Result<f64> {
    check_class(logits, target)?;
    Objective::Focal { gamma }.validate()?;
    Ok(focal_with_grad(logits, target, gamma).0)
}

/// Temperature-scaled distillation loss `T_tcr·T_stu·KL(σ(z_tcr/T_tcr) ‖ σ(z_stu/T_stu))`.
pub fn kd_soft_loss(z_tcr: &[f64], z_stu: &[f64], t_tcr: f64, t_stu: f64) -> Result<f64> {
    if z_tcr.len() != z_stu.len() || z_tcr.is_empty() {
        return domain("teacher and student logits must have the same nonzero length");
    }
    Objective::Distill {
        t_teacher: t_tcr,
        t_student: t_stu,
    }
    .validate()?;
    Ok(kd_with_grad(z_tcr, z_stu, t_tcr, t_stu).0)
}

/// Softmax probabilities of a logit window at temperature 1.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    softmax_unchecked(logits, 1.0)
}

/// Mixup of two labeled samples: `x = λx₁ + (1−λ)x₂`, soft target
/// `λ·onehot(y₁) + (1−λ)·onehot(y₂)` over `num_classes`.
pub fn mixup_pair(
    x1: &[f64],
    y1: usize,
    x2: &[f64],
    y2: usize,
    num_classes: usize,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x1.len() != x2.len() {
        return domain(format!(
            "mixup inputs have dimensions {} and {}",
            x1.len(),
            x2.len()
        ));
    }
    if y1 >= num_classes || y2 >= num_classes {
        return domain("mixup label out of range");
    }
    if !(0.0..=1.0).contains(&lambda) {
        return domain(format!(
            "mixup coefficient must lie in [0, 1], got {lambda}"
        ));
    }
    let x = x1
        .iter()
        .zip(x2)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    let mut target = vec![0.0; num_classes];
    target[y1] += lambda;
    target[y2] += 1.0 - lambda;
    Ok((x, target))
}

/// [`mixup_pair`] with `λ ~ U(0, 1)`.
pub fn mixup_pair_sampled<R: Rng>(
    x1: &[f64],
    y1: usize,
    x2: &[f64],
    y2: usize,
    num_classes: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let lambda: f64 = rng.random_range(0.0..=1.0);
    mixup_pair(x1, y1, x2, y2, num_classes, lambda)
}
