//! Distillation-based conditioning of a task vector.
//!
//! The student starts at the anchor `θ₀ = θ_pre + κτ` and minimises
//! `T_tcr·T_stu·KL(σ(z_tcr/T_tcr) ‖ σ(z_stu/T_stu)) + β‖θ − θ₀‖²` on unlabeled
//! inputs, where the teacher is the unscaled model `θ_pre + τ`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Targets, UnlabeledSet};
use crate::error::{domain, Error, Result};
use crate::loss::Objective;
use crate::metrics::{argmax, window_logits};
use crate::model::{grad_loss_stats, ModelSpec, ParamVector};
use crate::optim::AdamW;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdOptimizer {
    /// `θ ← θ − η∇L`.
    GradientDescent,
    /// AdamW at constant rate `η` without weight decay.
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub kappa: f64,
    pub t_teacher: f64,
    pub t_student: f64,
    pub beta: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: KdOptimizer,
    pub seed: u64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            t_teacher: 1.0,
            t_student: 1.0,
            beta: 0.5,
            steps: 500,
            learning_rate: 1e-3,
            batch_size: 64,
            optimizer: KdOptimizer::GradientDescent,
            seed: 0,
        }
    }
}

impl KdConfig {
    /// Equal temperatures (10, 10) with a shrinking `κ`.
    pub fn norm_mismatch(kappa: f64) -> Self {
        Self {
            kappa,
            t_teacher: 10.0,
            t_student: 10.0,
            ..Self::default()
        }
    }

    /// Student hotter than teacher, (1, 10), `κ = 1`.
    pub fn low_confidence() -> Self {
        Self {
            kappa: 1.0,
            t_teacher: 1.0,
            t_student: 10.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return domain(format!("κ must be positive, got {}", self.kappa));
        }
        if !(self.t_teacher > 0.0 && self.t_student > 0.0) {
            return domain("distillation temperatures must be positive");
        }
        if !(self.beta >= 0.0) {
            return domain(format!("β must be nonnegative, got {}", self.beta));
        }
        if !(self.learning_rate > 0.0) {
            return domain(format!("η must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return domain("batch size must be at least 1");
        }
        Ok(())
    }
}

/// Index of the largest norm (lowest index on ties) and the `κ` that brings
/// it to the mean of the other norms.
pub fn choose_kappa_norm_match(norms: &[f64]) -> Result<(usize, f64)> {
    if norms.len() < 2 {
        return domain("κ rule needs at least two task vectors");
    }
    if let Some(i) = norms.iter().position(|n| !(*n > 0.0 && n.is_finite())) {
        return domain(format!("task vector {i} has norm {}", norms[i]));
    }
    let mut idx = 0;
    for (i, n) in norms.iter().enumerate() {
        if *n > norms[idx] {
            idx = i;
        }
    }
    let others: f64 = norms
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != idx)
        .map(|(_, n)| n)
        .sum();
    let mean = others / (norms.len() - 1) as f64;
    Ok((idx, mean / norms[idx]))
}

/// Per-step conditioning log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdRecord {
    pub step: usize,
    /// Fraction of minibatch inputs where student and teacher agree on the top class.
    pub rel_accuracy: f64,
    /// `‖θ − θ_pre‖ / ‖κτ‖`.
    pub rel_norm: f64,
    /// Student predictive entropy at temperature 1 on the minibatch.
    pub entropy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct DistacRun {
    pub theta: ParamVector,
    pub history: Vec<KdRecord>,
}

/// A conditioning run that hit a non-finite loss.
#[derive(Debug, Clone)]
pub struct DistacFailure {
    pub error: Error,
    /// Parameters before the failing step; absent when the run failed during setup.
    pub last_good: Option<ParamVector>,
    pub history: Vec<KdRecord>,
}

impl From<DistacFailure> for Error {
    fn from(f: DistacFailure) -> Self {
        f.error
    }
}

impl From<Error> for DistacFailure {
    fn from(error: Error) -> Self {
        Self {
            error,
            last_good: None,
            history: Vec::new(),
        }
    }
}

/// Conditions `τ` and returns the student parameters `θ` (not a delta).
pub fn distac_condition(
    spec: &ModelSpec,
    theta_pre: &ParamVector,
    tau: &ParamVector,
    unlabeled: &UnlabeledSet,
    cfg: &KdConfig,
) -> std::result::Result<DistacRun, DistacFailure> {
    cfg.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::Domain("empty unlabeled set".into()).into());
    }
    let anchor = theta_pre.add_scaled(tau, cfg.kappa)?;
    let teacher = theta_pre.add(tau)?;
    let teacher_logits = window_logits(spec, &teacher, unlabeled)?;
    let anchor_norm = (cfg.kappa * tau.norm()).max(f64::MIN_POSITIVE);
    let objective = Objective::Distill {
        t_teacher: cfg.t_teacher,
        t_student: cfg.t_student,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = (cfg.optimizer == KdOptimizer::AdamW).then(|| AdamW::new(anchor.len(), 0.0));
    let mut theta = anchor.clone();
    let mut history = Vec::with_capacity(cfg.steps);
    let n = unlabeled.len();
    let size = cfg.batch_size.min(n);

    for step in 0..cfg.steps {
        let mut idx = sample(&mut rng, n, size).into_vec();
        idx.sort_unstable();
        let mut inputs = Vec::with_capacity(size * unlabeled.dim());
        for &i in &idx {
            inputs.extend_from_slice(unlabeled.input(i));
        }
        let targets: Vec<Vec<f64>> = idx.iter().map(|&i| teacher_logits[i].clone()).collect();
        let batch = Batch {
            dim: unlabeled.dim(),
            inputs,
            targets: Targets::Teacher(targets),
            head: unlabeled.head(),
        };
        let stats = grad_loss_stats(spec, &theta, &batch, &objective)?;

        let offset = theta.sub(&anchor)?;
        let loss = stats.loss + cfg.beta * offset.values().iter().map(|v| v * v).sum::<f64>();
        if !loss.is_finite() || !stats.grad.is_finite() {
            return Err(DistacFailure {
                error: Error::NonFinite {
                    step,
                    detail: format!(
                        "distillation loss {loss} (κ {}, η {:.3e})",
                        cfg.kappa, cfg.learning_rate
                    ),
                },
                last_good: Some(theta),
                history,
            });
        }
        let grad = stats.grad.add_scaled(&offset, 2.0 * cfg.beta)?;

        let student_logits = window_logits(spec, &theta, &BatchInputs(&batch))?;
        let agree = student_logits
            .iter()
            .zip(&idx)
            .filter(|(z, &i)| argmax(z) == argmax(&teacher_logits[i]))
            .count() as f64
            / size as f64;

        match adam.as_mut() {
            Some(opt) => opt.step(theta.values_mut(), grad.values(), cfg.learning_rate, None),
            None => theta
                .values_mut()
                .iter_mut()
                .zip(grad.values())
                .for_each(|(t, g)| *t -= cfg.learning_rate * g),
        }
        history.push(KdRecord {
            step,
            rel_accuracy: agree,
            rel_norm: theta.sub(theta_pre)?.norm() / anchor_norm,
            entropy: stats.entropy,
            loss,
        });
    }
    Ok(DistacRun { theta, history })
}

/// Minibatch inputs viewed as an unlabeled set.
struct BatchInputs<'a>(&'a Batch);

impl crate::data::InputSet for BatchInputs<'_> {
    fn dim(&self) -> usize {
        self.0.dim
    }
    fn len(&self) -> usize {
        self.0.len()
    }
    fn input(&self, i: usize) -> &[f64] {
        self.0.input(i)
    }
    fn head(&self) -> crate::data::Head {
        self.0.head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_rule_examples() {
        assert_eq!(
            choose_kappa_norm_match(&[10.0, 1.0, 1.0, 1.0]).unwrap(),
            (0, 0.1)
        );
        assert_eq!(choose_kappa_norm_match(&[6.0, 3.0]).unwrap(), (0, 0.5));
        assert_eq!(choose_kappa_norm_match(&[2.0, 2.0, 2.0]).unwrap(), (0, 1.0));
        assert_eq!(choose_kappa_norm_match(&[1.0, 4.0, 4.0]).unwrap().0, 1);
        assert!(choose_kappa_norm_match(&[1.0, 0.0]).is_err());
        assert!(choose_kappa_norm_match(&[1.0]).is_err());
    }

    #[test]
    fn profiles() {
        let nm = KdConfig::norm_mismatch(0.3);
        assert_eq!(
            (nm.t_teacher, nm.t_student, nm.kappa, nm.steps, nm.beta),
            (10.0, 10.0, 0.3, 500, 0.5)
        );
        let lc = KdConfig::low_confidence();
        assert_eq!((lc.t_teacher, lc.t_student, lc.kappa), (1.0, 10.0, 1.0));
        assert!(KdConfig {
            kappa: 0.0,
            ..KdConfig::default()
        }
        .validate()
        .is_err());
    }
}
