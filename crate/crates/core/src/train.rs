//! Fine-tuning, pretraining and joint multi-task training loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, LabeledSet, Targets};
use crate::error::{domain, Error, Result};
use crate::loss::{mixup_pair_sampled, Objective};
use crate::model::{grad_loss_stats, init_params, ModelSpec, ParamVector};
use crate::optim::{lr_at, AdamW, Schedule};

/// Training objective with its confidence-altering variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    CrossEntropy,
    LabelSmoothing { alpha: f64 },
    Mixup,
    Focal { gamma: f64 },
}

impl LossSpec {
    pub const DEFAULT_SMOOTHING: f64 = 0.1;
    pub const DEFAULT_FOCAL_GAMMA: f64 = 10.0;

    pub fn label_smoothing() -> Self {
        LossSpec::LabelSmoothing {
            alpha: Self::DEFAULT_SMOOTHING,
        }
    }

    pub fn focal() -> Self {
        LossSpec::Focal {
            gamma: Self::DEFAULT_FOCAL_GAMMA,
        }
    }

    fn objective(&self) -> Objective {
        match *self {
            LossSpec::CrossEntropy => Objective::CrossEntropy { smoothing: 0.0 },
            LossSpec::LabelSmoothing { alpha } => Objective::CrossEntropy { smoothing: alpha },
            LossSpec::Mixup => Objective::SoftCrossEntropy,
            LossSpec::Focal { gamma } => Objective::Focal { gamma },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub loss: LossSpec,
    pub seed: u64,
    /// Keep the output layer at its initial values.
    #[serde(default)]
    pub freeze_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            steps: 500,
            warmup_steps: 50,
            schedule: Schedule::Cosine,
            weight_decay: 0.1,
            batch_size: 64,
            loss: LossSpec::CrossEntropy,
            seed: 0,
            freeze_head: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return domain(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.warmup_steps > self.steps {
            return domain(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            ));
        }
        if self.batch_size == 0 {
            return domain("batch_size must be at least 1");
        }
        if !(self.weight_decay >= 0.0) {
            return domain("weight_decay must be nonnegative");
        }
        self.loss.objective().validate()
    }
}

/// One row of the per-step training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub train_entropy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub theta: ParamVector,
    pub history: Vec<TrainRecord>,
}

/// Mask over `θ` marking the output layer's weight and bias blocks.
pub fn head_mask(theta: &ParamVector) -> Vec<bool> {
    let n_blocks = theta.shapes().entries().len();
    let mut mask = vec![false; theta.len()];
    for b in n_blocks.saturating_sub(2)..n_blocks {
        mask[theta.shapes().range(b)]
            .iter_mut()
            .for_each(|m| *m = true);
    }
    mask
}

/// Epoch-shuffled minibatch index stream over one dataset.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut idx = Vec::with_capacity(size);
        while idx.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            idx.push(self.order[self.pos]);
            self.pos += 1;
        }
        idx
    }
}

fn make_batch(
    set: &LabeledSet,
    idx: &[usize],
    loss: &LossSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if *loss != LossSpec::Mixup {
        return Ok(Batch::from_labeled(set, idx));
    }
    let c = set.head().len;
    let mut partners = idx.to_vec();
    partners.shuffle(rng);
    let mut inputs = Vec::with_capacity(idx.len() * set.dim());
    let mut targets = Vec::with_capacity(idx.len());
    for (&i, &j) in idx.iter().zip(&partners) {
        let (x, q) = mixup_pair_sampled(
            set.input(i),
            set.label(i),
            set.input(j),
            set.label(j),
            c,
            rng,
        )?;
        inputs.extend(x);
        targets.push(q);
    }
    Ok(Batch {
        dim: set.dim(),
        inputs,
        targets: Targets::Soft(targets),
        head: set.head(),
    })
}

fn train_loop(
    spec: &ModelSpec,
    theta_init: &ParamVector,
    tasks: &[&LabeledSet],
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    spec.validate()?;
    if tasks.is_empty() || tasks.iter().any(|t| t.is_empty()) {
        return domain("training data must be nonempty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samplers: Vec<Sampler> = tasks
        .iter()
        .map(|t| Sampler::new(t.len(), &mut rng))
        .collect();
    let frozen = cfg.freeze_head.then(|| head_mask(theta_init));
    let objective = cfg.loss.objective();
    let mut theta = theta_init.clone();
    let mut opt = AdamW::new(theta.len(), cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let t = step % tasks.len();
        let size = cfg.batch_size.min(tasks[t].len());
        let idx = samplers[t].next(size, &mut rng);
        let batch = make_batch(tasks[t], &idx, &cfg.loss, &mut rng)?;
        let stats = grad_loss_stats(spec, &theta, &batch, &objective)?;
        if !stats.loss.is_finite() || !stats.grad.is_finite() {
            let last = history.last().map_or(f64::NAN, |r: &TrainRecord| r.loss);
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "loss {} (previous {last}), lr {:.3e}, task {t}, ‖θ‖ {:.4e}",
                    stats.loss,
                    lr_at(
                        cfg.schedule,
                        cfg.learning_rate,
                        step,
                        cfg.warmup_steps,
                        cfg.steps
                    ),
                    theta.norm()
                ),
            });
        }
        let lr = lr_at(
            cfg.schedule,
            cfg.learning_rate,
            step,
            cfg.warmup_steps,
            cfg.steps,
        );
        opt.step(
            theta.values_mut(),
            stats.grad.values(),
            lr,
            frozen.as_deref(),
        );
        if !theta.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("parameters diverged after update with lr {lr:.3e}"),
            });
        }
        history.push(TrainRecord {
            step,
            loss: stats.loss,
            train_entropy: stats.entropy,
        });
    }
    Ok(TrainRun { theta, history })
}

/// Fine-tunes `θ_init` on one task.
pub fn finetune(
    spec: &ModelSpec,
    theta_init: &ParamVector,
    data: &LabeledSet,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    train_loop(spec, theta_init, &[data], cfg)
}

/// Joint training on several tasks with round-robin minibatches.
pub fn train_mtl(
    spec: &ModelSpec,
    theta_pre: &ParamVector,
    tasks: &[&LabeledSet],
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    if tasks.is_empty() {
        return domain("multi-task training needs at least one task");
    }
    train_loop(spec, theta_pre, tasks, cfg)
}

/// Seeded He-uniform initialization followed by training on a generic mixture.
pub fn pretrain(spec: &ModelSpec, mixture: &[&LabeledSet], cfg: &TrainConfig) -> Result<TrainRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1417);
    let theta0 = init_params(spec, &mut rng)?;
    train_loop(spec, &theta0, mixture, cfg)
}
