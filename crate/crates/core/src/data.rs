//! In-memory datasets and minibatches.
//!
//! Every set carries a [`Head`]: the contiguous window of logits that belongs
//! to its task. Losses, predictions and calibration metrics only ever look at
//! that window, so several tasks can share one output layer the way per-task
//! classifier heads do.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// A contiguous window `[start, start + len)` of the logit vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Head {
    pub start: usize,
    pub len: usize,
}

impl Head {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    /// The whole output of a `num_classes`-way classifier.
    pub fn full(num_classes: usize) -> Self {
        Self {
            start: 0,
            len: num_classes,
        }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn slice<'a>(&self, logits: &'a [f64]) -> &'a [f64] {
        &logits[self.start..self.end()]
    }

    pub(crate) fn check(&self, num_classes: usize) -> Result<()> {
        if self.len == 0 || self.end() > num_classes {
            return domain(format!(
                "head window [{}, {}) does not fit {num_classes} logits",
                self.start,
                self.end()
            ));
        }
        Ok(())
    }
}

/// Labeled samples stored row-major. Labels are indices within the head window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    dim: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
    head: Head,
}

impl LabeledSet {
    pub fn new(dim: usize, inputs: Vec<f64>, labels: Vec<usize>, head: Head) -> Result<Self> {
        if dim == 0 || inputs.len() != dim * labels.len() {
            return domain(format!(
                "labeled set: {} input values for {} labels of dimension {dim}",
                inputs.len(),
                labels.len()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= head.len) {
            return domain(format!("label {bad} outside head of {} classes", head.len));
        }
        Ok(Self {
            dim,
            inputs,
            labels,
            head,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            inputs.extend_from_slice(self.input(i));
        }
        Self {
            dim: self.dim,
            inputs,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            head: self.head,
        }
    }

    /// Splits off the trailing `fraction` of samples (order preserved).
    pub fn split_tail(&self, fraction: f64) -> (Self, Self) {
        let n_tail = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - n_tail.min(self.len());
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Relabels this set onto a different logit window.
    pub fn with_head(mut self, head: Head) -> Result<Self> {
        if let Some(bad) = self.labels.iter().find(|&&y| y >= head.len) {
            return domain(format!("label {bad} outside head of {} classes", head.len));
        }
        self.head = head;
        Ok(self)
    }

    /// Drops the labels.
    pub fn unlabeled(&self) -> UnlabeledSet {
        UnlabeledSet {
            dim: self.dim,
            inputs: self.inputs.clone(),
            head: self.head,
        }
    }

    pub fn concat(sets: &[&LabeledSet]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| crate::Error::Domain("no sets to concatenate".into()))?;
        if sets
            .iter()
            .any(|s| s.dim != first.dim || s.head != first.head)
        {
            return domain("concatenated sets must share dimension and head");
        }
        Ok(Self {
            dim: first.dim,
            inputs: sets.iter().flat_map(|s| s.inputs.iter().copied()).collect(),
            labels: sets.iter().flat_map(|s| s.labels.iter().copied()).collect(),
            head: first.head,
        })
    }
}

/// Inputs drawn from a task's distribution. There is no label field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledSet {
    dim: usize,
    inputs: Vec<f64>,
    head: Head,
}

impl UnlabeledSet {
    pub fn new(dim: usize, inputs: Vec<f64>, head: Head) -> Result<Self> {
        if dim == 0 || inputs.is_empty() || !inputs.len().is_multiple_of(dim) {
            return domain("unlabeled set must be a nonempty multiple of the input dimension");
        }
        Ok(Self { dim, inputs, head })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            dim: self.dim,
            inputs: self.inputs[..n * self.dim].to_vec(),
            head: self.head,
        }
    }
}

/// Read access to the inputs of a dataset, labeled or not.
pub trait InputSet {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn input(&self, i: usize) -> &[f64];
    fn head(&self) -> Head;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl InputSet for LabeledSet {
    fn dim(&self) -> usize {
        self.dim
    }
    fn len(&self) -> usize {
        self.labels.len()
    }
    fn input(&self, i: usize) -> &[f64] {
        LabeledSet::input(self, i)
    }
    fn head(&self) -> Head {
        self.head
    }
}

impl InputSet for UnlabeledSet {
    fn dim(&self) -> usize {
        self.dim
    }
    fn len(&self) -> usize {
        UnlabeledSet::len(self)
    }
    fn input(&self, i: usize) -> &[f64] {
        UnlabeledSet::input(self, i)
    }
    fn head(&self) -> Head {
        self.head
    }
}

/// Per-sample supervision attached to a [`Batch`].
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Class indices within the head window.
    Hard(Vec<usize>),
    /// Target distributions over the head window, one per sample.
    Soft(Vec<Vec<f64>>),
    /// Teacher logits over the head window, one per sample.
    Teacher(Vec<Vec<f64>>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Hard(v) => v.len(),
            Targets::Soft(v) | Targets::Teacher(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub dim: usize,
    pub inputs: Vec<f64>,
    pub targets: Targets,
    pub head: Head,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn from_labeled(set: &LabeledSet, idx: &[usize]) -> Self {
        let sub = set.subset(idx);
        Self {
            dim: sub.dim,
            targets: Targets::Hard(sub.labels),
            inputs: sub.inputs,
            head: sub.head,
        }
    }
}
