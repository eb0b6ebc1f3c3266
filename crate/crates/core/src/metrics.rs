//! Accuracy, normalized accuracy, predictive entropy, reliability/ECE and
//! temperature scaling.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{InputSet, LabeledSet};
use crate::error::{domain, Result};
use crate::linalg::{entropy_of, log_softmax_unchecked, softmax_unchecked};
use crate::model::{forward_logits, ModelSpec, ParamVector};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Head-window logits for every sample.
pub fn window_logits<S: InputSet + ?Sized>(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &S,
) -> Result<Vec<Vec<f64>>> {
    let head = data.head();
    if head.end() > spec.num_classes || head.len == 0 {
        return domain("dataset head does not fit the model output");
    }
    (0..data.len())
        .map(|i| {
            Ok(head
                .slice(&forward_logits(spec, theta, data.input(i))?)
                .to_vec())
        })
        .collect()
}

pub fn accuracy_of_logits(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(z, y)| argmax(z) == **y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Fraction of samples whose argmax over the head window equals the label.
pub fn accuracy(spec: &ModelSpec, theta: &ParamVector, data: &LabeledSet) -> Result<f64> {
    if data.is_empty() {
        return domain("accuracy of an empty dataset");
    }
    Ok(accuracy_of_logits(
        &window_logits(spec, theta, data)?,
        data.labels(),
    ))
}

/// `merged / individual` for one task.
pub fn normalized_accuracy(merged: f64, individual: f64) -> Result<f64> {
    if !(individual > 0.0) {
        return domain(format!(
            "individual accuracy must be positive, got {individual}"
        ));
    }
    Ok(merged / individual)
}

pub fn mean_entropy_of_logits(logits: &[Vec<f64>]) -> f64 {
    logits
        .iter()
        .map(|z| entropy_of(&softmax_unchecked(z, 1.0)))
        .sum::<f64>()
        / logits.len() as f64
}

/// Mean entropy of `softmax(logits)` over the head window.
pub fn predictive_entropy<S: InputSet + ?Sized>(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &S,
) -> Result<f64> {
    if data.is_empty() {
        return domain("entropy of an empty dataset");
    }
    Ok(mean_entropy_of_logits(&window_logits(spec, theta, data)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    /// Mean confidence of the bin, 0 when empty.
    pub confidence: f64,
    /// Empirical accuracy of the bin, 0 when empty.
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
}

/// Equal-width reliability bins over `[0, 1]` from per-sample confidence and
/// correctness. Confidence 1.0 falls into the last bin.
pub fn reliability_from_predictions(
    confidence: &[f64],
    correct: &[bool],
    num_bins: usize,
) -> Result<ReliabilityReport> {
    if num_bins == 0 {
        return domain("num_bins must be at least 1");
    }
    if confidence.len() != correct.len() || confidence.is_empty() {
        return domain("confidence and correctness must be nonempty and of equal length");
    }
    let mut sums = vec![(0.0, 0usize, 0usize); num_bins];
    for (&c, &ok) in confidence.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return domain(format!("confidence {c} outside [0, 1]"));
        }
        let b = ((c * num_bins as f64) as usize).min(num_bins - 1);
        sums[b].0 += c;
        sums[b].1 += ok as usize;
        sums[b].2 += 1;
    }
    let n = confidence.len() as f64;
    let mut ece = 0.0;
    let bins = sums
        .iter()
        .enumerate()
        .map(|(b, &(conf_sum, hits, count))| {
            let (confidence, accuracy) = if count > 0 {
                (conf_sum / count as f64, hits as f64 / count as f64)
            } else {
                (0.0, 0.0)
            };
            if count > 0 {
                ece += count as f64 / n * (accuracy - confidence).abs();
            }
            ReliabilityBin {
                lo: b as f64 / num_bins as f64,
                hi: (b + 1) as f64 / num_bins as f64,
                confidence,
                accuracy,
                count,
            }
        })
        .collect();
    Ok(ReliabilityReport {
        bins,
        ece: ece.clamp(0.0, 1.0),
    })
}

/// Reliability diagram with max-softmax confidence.
pub fn reliability(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &LabeledSet,
    num_bins: usize,
) -> Result<ReliabilityReport> {
    if data.is_empty() {
        return domain("reliability of an empty dataset");
    }
    let logits = window_logits(spec, theta, data)?;
    let mut conf = Vec::with_capacity(logits.len());
    let mut correct = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(data.labels()) {
        let p = softmax_unchecked(z, 1.0);
        let k = argmax(z);
        conf.push(p[k].clamp(0.0, 1.0));
        correct.push(k == y);
    }
    reliability_from_predictions(&conf, &correct, num_bins)
}

/// Mean negative log-likelihood of `softmax(z / T)`.
pub fn nll_at_temperature(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| -log_softmax_unchecked(z, t)[y])
        .sum();
    total / labels.len() as f64
}

pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);
pub const TEMPERATURE_TOL: f64 = 1e-4;

/// Golden-section search for the NLL-minimising temperature on `[0.05, 20]`.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return domain("temperature fit needs matching, nonempty logits and labels");
    }
    if labels.iter().all(|&y| y == labels[0]) {
        warn!("temperature fit on single-label data is degenerate; using T = 1");
        return Ok(1.0);
    }
    let f = |t: f64| nll_at_temperature(logits, labels, t);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = TEMPERATURE_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > TEMPERATURE_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    Ok(0.5 * (a + b))
}

/// Temperature minimising validation NLL of the model's head-window logits.
pub fn temperature_scale_fit(
    spec: &ModelSpec,
    theta: &ParamVector,
    validation: &LabeledSet,
) -> Result<f64> {
    if validation.is_empty() {
        return domain("empty validation set");
    }
    fit_temperature(
        &window_logits(spec, theta, validation)?,
        validation.labels(),
    )
}

pub fn default_kappa_grid() -> Vec<f64> {
    (0..=30).map(|i| i as f64 * 0.1).collect()
}

/// Accuracy of `θ_pre + κτ` at each grid point.
pub fn scaling_sweep(
    spec: &ModelSpec,
    theta_pre: &ParamVector,
    tau: &ParamVector,
    data: &LabeledSet,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    grid.iter()
        .map(|&k| Ok((k, accuracy(spec, &theta_pre.add_scaled(tau, k)?, data)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: String,
    pub accuracy: f64,
    pub normalized_accuracy: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_task: Vec<TaskEval>,
    pub mean_accuracy: f64,
    /// Mean of per-task ratios.
    pub mean_normalized_accuracy: f64,
    pub mean_entropy: f64,
}

impl EvalResult {
    pub fn from_tasks(per_task: Vec<TaskEval>) -> Result<Self> {
        if per_task.is_empty() {
            return domain("no tasks to aggregate");
        }
        let n = per_task.len() as f64;
        let mean = |f: fn(&TaskEval) -> f64| per_task.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            mean_accuracy: mean(|t| t.accuracy),
            mean_normalized_accuracy: mean(|t| t.normalized_accuracy),
            mean_entropy: mean(|t| t.entropy),
            per_task,
        })
    }
}

/// Evaluates one model on several tasks: `(task id, data, individual accuracy)`.
pub fn evaluate(
    spec: &ModelSpec,
    theta: &ParamVector,
    tasks: &[(&str, &LabeledSet, f64)],
) -> Result<EvalResult> {
    let per_task = tasks
        .iter()
        .map(|&(id, data, individual)| {
            if data.is_empty() {
                return domain(format!("task {id}: empty evaluation set"));
            }
            let logits = window_logits(spec, theta, data)?;
            let acc = accuracy_of_logits(&logits, data.labels());
            Ok(TaskEval {
                task_id: id.to_string(),
                accuracy: acc,
                normalized_accuracy: normalized_accuracy(acc, individual)?,
                entropy: mean_entropy_of_logits(&logits),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_tasks(per_task)
}
