//! Per-task datasets: seeded Gaussian class clusters or sliced IDX archives.
//!
//! Task `t` owns classes `[t·c, (t+1)·c)` of a shared `T·c`-way output. Every
//! split is labeled within its task window. For synthetic suites the
//! pretraining mixture is drawn around displaced class means, so the pretrained
//! model starts off-target on every task and fine-tuning has work to do.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use taskmerge_core::data::{Head, LabeledSet, UnlabeledSet};
use taskmerge_core::linalg::{svd_thin, DenseMatrix};

use crate::error::{Error, Result};
use crate::idx::{load_idx, IdxSplit};
use crate::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    SyntheticGaussian,
    IdxFiles,
}

/// Which archive labels go to which task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSlicing {
    /// Task `t` takes labels `t·c .. (t+1)·c`.
    Consecutive,
    /// Task `t` takes labels `l` with `l mod T = t`, in increasing order.
    Strided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub slicing: TaskSlicing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub classes_per_task: usize,
    pub input_dim: usize,
    /// Labeled pool per task, split into train and validation.
    pub train_samples: usize,
    pub val_fraction: f64,
    pub test_samples: usize,
    /// Label-free inputs per task reserved for distillation.
    pub unlabeled_samples: usize,
    pub pretrain_samples: usize,
    /// Length, in units of σ, of a translation shared by all of a task's
    /// pretraining class means.
    pub pretrain_shift: f64,
    /// Length, in units of σ, of an extra per-class displacement of the pretraining means.
    pub pretrain_class_shift: f64,
    /// Angle in degrees by which a random task-specific rotation turns every
    /// class mean on the way from the pretraining domain to the task domain.
    pub pretrain_rotation: f64,
    /// Within-class standard deviation σ.
    pub sigma: f64,
    /// Standard deviation of each class-mean coordinate.
    pub mean_spread: f64,
    /// Required pairwise class-mean distance in units of σ.
    pub min_separation: f64,
    pub max_retries: usize,
    pub seed: u64,
    pub idx: Option<IdxSource>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SyntheticGaussian,
            classes_per_task: 4,
            input_dim: 16,
            train_samples: 500,
            val_fraction: 0.2,
            test_samples: 400,
            unlabeled_samples: 512,
            pretrain_samples: 400,
            pretrain_shift: 0.0,
            pretrain_class_shift: 0.0,
            pretrain_rotation: 30.0,
            sigma: 1.0,
            mean_spread: 1.0,
            min_separation: 4.0,
            max_retries: 200,
            seed: 0,
            idx: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dataset: {m}")));
        if self.classes_per_task < 2 {
            return bad("classes_per_task must be at least 2");
        }
        if self.train_samples == 0 || self.test_samples == 0 || self.unlabeled_samples == 0 {
            return bad("train, test and unlabeled sample counts must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if self.kind == DatasetKind::SyntheticGaussian {
            if self.input_dim == 0 {
                return bad("input_dim must be positive");
            }
            if !(self.sigma > 0.0
                && self.mean_spread > 0.0
                && self.min_separation >= 0.0
                && self.pretrain_shift >= 0.0
                && self.pretrain_class_shift >= 0.0)
            {
                return bad("sigma and mean_spread must be positive, min_separation and pretrain shifts nonnegative");
            }
            if !self.pretrain_rotation.is_finite() {
                return bad("pretrain_rotation must be finite");
            }
        }
        if self.kind == DatasetKind::IdxFiles && self.idx.is_none() {
            return bad("kind = idx_files needs an [dataset.idx] section");
        }
        Ok(())
    }
}

/// All splits of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub id: String,
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
    pub unlabeled: UnlabeledSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub input_dim: usize,
    pub num_classes: usize,
    pub tasks: Vec<TaskData>,
    /// Pretraining data, one set per task window.
    pub pretrain: Vec<LabeledSet>,
    /// Class means `[task][class]` for synthetic suites.
    pub class_means: Vec<Vec<Vec<f64>>>,
}

impl TaskSuite {
    pub fn pretrain_refs(&self) -> Vec<&LabeledSet> {
        self.pretrain.iter().collect()
    }
}

pub fn task_id(t: usize) -> String {
    format!("task{t}")
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Smallest pairwise distance between the given points.
pub fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min(dist(&points[i], &points[j]));
        }
    }
    best
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniformly oriented vector of the given length.
fn random_direction(d: usize, length: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let u: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let n = u
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    u.into_iter().map(|v| length * v / n).collect()
}

/// `Q·diag(R(φ), R(φ), …)·Qᵀ` for a random orthogonal `Q`: turns every vector
/// by exactly `φ` when `d` is even (one axis is left fixed when `d` is odd).
fn random_rotation(d: usize, angle: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let g = DenseMatrix::new(d, d, (0..d * d).map(|_| normal(rng)).collect()).expect("finite");
    let q = svd_thin(&g).expect("gaussian matrices decompose").u;
    let mut block = DenseMatrix::identity(d);
    let (c, s) = (angle.cos(), angle.sin());
    for k in 0..d / 2 {
        let (i, j) = (2 * k, 2 * k + 1);
        block.set(i, i, c);
        block.set(i, j, -s);
        block.set(j, i, s);
        block.set(j, j, c);
    }
    q.matmul(&block)
        .and_then(|m| m.matmul(&q.transpose()))
        .expect("square")
}

fn sample_means(spec: &DatasetSpec, rng: &mut ChaCha8Rng, task: usize) -> Result<Vec<Vec<f64>>> {
    let need = spec.min_separation * spec.sigma;
    for _ in 0..=spec.max_retries {
        let means: Vec<Vec<f64>> = (0..spec.classes_per_task)
            .map(|_| {
                (0..spec.input_dim)
                    .map(|_| spec.mean_spread * normal(rng))
                    .collect()
            })
            .collect();
        if min_pairwise_distance(&means) >= need {
            return Ok(means);
        }
    }
    Err(Error::Data(format!(
        "task {task}: no class means {need}-separated after {} retries (spread {}, dim {})",
        spec.max_retries, spec.mean_spread, spec.input_dim
    )))
}

/// Balanced, shuffled draws from the class clusters.
fn draw(
    spec: &DatasetSpec,
    means: &[Vec<f64>],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<usize>) {
    let c = means.len();
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(rng);
    let mut inputs = Vec::with_capacity(n * spec.input_dim);
    for &y in &labels {
        for m in &means[y] {
            inputs.push(m + spec.sigma * normal(rng));
        }
    }
    (inputs, labels)
}

/// Seeded Gaussian tasks. Identical specs give identical suites.
pub fn gen_synthetic_tasks(spec: &DatasetSpec, num_tasks: usize) -> Result<TaskSuite> {
    spec.validate()?;
    if num_tasks == 0 {
        return Err(Error::Config("num_tasks must be at least 1".into()));
    }
    let c = spec.classes_per_task;
    let d = spec.input_dim;
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut pretrain = Vec::with_capacity(num_tasks);
    let mut class_means = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, t as u64));
        let means = sample_means(spec, &mut rng, t)?;
        let head = Head::new(t * c, c);
        let (x, y) = draw(spec, &means, spec.train_samples, &mut rng);
        let (train, val) = LabeledSet::new(d, x, y, head)?.split_tail(spec.val_fraction);
        let (x, y) = draw(spec, &means, spec.test_samples, &mut rng);
        let test = LabeledSet::new(d, x, y, head)?;
        let (x, _) = draw(spec, &means, spec.unlabeled_samples, &mut rng);
        let unlabeled = UnlabeledSet::new(d, x, head)?;
        let common = random_direction(d, spec.pretrain_shift * spec.sigma, &mut rng);
        let turn = random_rotation(d, spec.pretrain_rotation.to_radians(), &mut rng);
        let shifted: Vec<Vec<f64>> = means
            .iter()
            .map(|m| {
                let own = random_direction(d, spec.pretrain_class_shift * spec.sigma, &mut rng);
                let r = turn.matvec(m).expect("square rotation");
                r.iter()
                    .zip(&common)
                    .zip(&own)
                    .map(|((a, b), c)| a + b + c)
                    .collect()
            })
            .collect();
        let (x, y) = draw(spec, &shifted, spec.pretrain_samples, &mut rng);
        pretrain.push(LabeledSet::new(d, x, y, head)?);
        tasks.push(TaskData {
            id: task_id(t),
            train,
            val,
            test,
            unlabeled,
        });
        class_means.push(means);
    }
    Ok(TaskSuite {
        input_dim: d,
        num_classes: num_tasks * c,
        tasks,
        pretrain,
        class_means,
    })
}

fn task_labels(slicing: TaskSlicing, t: usize, c: usize, num_tasks: usize) -> Vec<u8> {
    (0..c)
        .map(|k| match slicing {
            TaskSlicing::Consecutive => t * c + k,
            TaskSlicing::Strided => k * num_tasks + t,
        } as u8)
        .collect()
}

/// Seeded shuffle of the samples carrying one of `labels`, relabeled to positions in `labels`.
fn select(split: &IdxSplit, labels: &[u8], rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..split.len())
        .filter(|&i| labels.contains(&split.labels[i]))
        .collect();
    idx.shuffle(rng);
    let local = idx
        .iter()
        .map(|&i| labels.iter().position(|&l| l == split.labels[i]).unwrap())
        .collect();
    (idx, local)
}

fn gather(split: &IdxSplit, idx: &[usize]) -> Vec<f64> {
    idx.iter()
        .flat_map(|&i| split.image(i).iter().copied())
        .collect()
}

/// Tasks cut from an IDX train/test archive pair by label.
pub fn load_idx_tasks(spec: &DatasetSpec, num_tasks: usize) -> Result<TaskSuite> {
    spec.validate()?;
    let src = spec
        .idx
        .as_ref()
        .ok_or_else(|| Error::Config("dataset.idx is missing".into()))?;
    let train_split = load_idx(&src.train_images, &src.train_labels)?;
    let test_split = load_idx(&src.test_images, &src.test_labels)?;
    if train_split.dim() != test_split.dim() {
        return Err(Error::Data("train and test images differ in size".into()));
    }
    let c = spec.classes_per_task;
    if num_tasks * c > 256 {
        return Err(Error::Config(format!(
            "{num_tasks} tasks × {c} classes exceed the 256 IDX labels"
        )));
    }
    let d = train_split.dim();
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut pretrain = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let labels = task_labels(src.slicing, t, c, num_tasks);
        let head = Head::new(t * c, c);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, t as u64));
        let (idx, local) = select(&train_split, &labels, &mut rng);
        if let Some(k) = (0..c).find(|k| !local.contains(k)) {
            return Err(Error::Data(format!(
                "task {t}: label {} has no training images",
                labels[k]
            )));
        }
        let n_train = spec.train_samples.min(idx.len());
        if n_train < 2 {
            return Err(Error::Data(format!(
                "task {t}: labels {labels:?} have fewer than 2 training images"
            )));
        }
        let pool = LabeledSet::new(
            d,
            gather(&train_split, &idx[..n_train]),
            local[..n_train].to_vec(),
            head,
        )?;
        let (train, val) = pool.split_tail(spec.val_fraction);
        // Leftover training images act as the unlabeled pool; without leftovers the
        // labeled pool's inputs are reused.
        let rest = &idx[n_train..];
        let unlabeled = if rest.is_empty() {
            pool.unlabeled()
        } else {
            let take = spec.unlabeled_samples.min(rest.len());
            UnlabeledSet::new(d, gather(&train_split, &rest[..take]), head)?
        };
        let n_pre = spec.pretrain_samples.min(n_train);
        pretrain.push(LabeledSet::new(
            d,
            gather(&train_split, &idx[..n_pre]),
            local[..n_pre].to_vec(),
            head,
        )?);
        let (tidx, tlocal) = select(&test_split, &labels, &mut rng);
        let n_test = spec.test_samples.min(tidx.len());
        if n_test == 0 {
            return Err(Error::Data(format!(
                "task {t}: no test images for labels {labels:?}"
            )));
        }
        let test = LabeledSet::new(
            d,
            gather(&test_split, &tidx[..n_test]),
            tlocal[..n_test].to_vec(),
            head,
        )?;
        tasks.push(TaskData {
            id: task_id(t),
            train,
            val,
            test,
            unlabeled,
        });
    }
    Ok(TaskSuite {
        input_dim: d,
        num_classes: num_tasks * c,
        tasks,
        pretrain,
        class_means: Vec::new(),
    })
}

pub fn load_suite(spec: &DatasetSpec, num_tasks: usize) -> Result<TaskSuite> {
    match spec.kind {
        DatasetKind::SyntheticGaussian => gen_synthetic_tasks(spec, num_tasks),
        DatasetKind::IdxFiles => load_idx_tasks(spec, num_tasks),
    }
}
