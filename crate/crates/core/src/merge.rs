//! Task vectors and the merge family `θ = θ_pre + Σ_t P_t τ_t`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{domain, Result};
use crate::linalg::{cosine_similarity, inv_sqrt_psd, svd_thin, DenseMatrix};
use crate::metrics::accuracy;
use crate::model::{ModelSpec, ParamKind, ParamVector};
use crate::train::TrainConfig;

/// `τ_t = θ_t − θ_pre` with its origin.
#[derive(Debug, Clone)]
pub struct TaskVector {
    pub delta: ParamVector,
    pub task_id: String,
    pub train_meta: Option<TrainConfig>,
}

impl TaskVector {
    pub fn norm(&self) -> f64 {
        self.delta.norm()
    }

    /// `θ_pre + s·τ`.
    pub fn apply(&self, theta_pre: &ParamVector, s: f64) -> Result<ParamVector> {
        theta_pre.add_scaled(&self.delta, s)
    }

    /// The same task vector multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            delta: self.delta.scale(s),
            ..self.clone()
        }
    }
}

pub fn compute_task_vector(
    theta_t: &ParamVector,
    theta_pre: &ParamVector,
    task_id: impl Into<String>,
    train_meta: Option<TrainConfig>,
) -> Result<TaskVector> {
    let delta = theta_t.sub(theta_pre)?;
    if !delta.is_finite() {
        return domain("task vector has non-finite entries");
    }
    Ok(TaskVector {
        delta,
        task_id: task_id.into(),
        train_meta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Uniform,
    TaskArithmetic,
    Ties,
    Consensus,
    Tsvm,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 5] = [
        MergeMethod::Uniform,
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
        MergeMethod::Consensus,
        MergeMethod::Tsvm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::Uniform => "uniform",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::Consensus => "consensus",
            MergeMethod::Tsvm => "tsvm",
        }
    }

    /// Whether the merged model depends on the shared coefficient λ.
    pub fn uses_lambda(self) -> bool {
        self != MergeMethod::Uniform
    }
}

impl std::str::FromStr for MergeMethod {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        MergeMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| crate::Error::Domain(format!("unknown merge method {s:?}")))
    }
}

/// Per-task truncation rank for the TSVM factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankPolicy {
    /// Every singular triplet.
    Full,
    /// The leading `r` triplets of each task.
    TopK(usize),
    /// `max(1, ⌊min(m, n) / T⌋)` so the stacked factors fit the layer.
    Auto,
}

impl RankPolicy {
    fn rank(self, rows: usize, cols: usize, tasks: usize) -> usize {
        let full = rows.min(cols);
        match self {
            RankPolicy::Full => full,
            RankPolicy::TopK(r) => r.clamp(1, full),
            RankPolicy::Auto => (full / tasks.max(1)).max(1),
        }
    }
}

pub fn default_lambda_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub method: MergeMethod,
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
    pub ties_keep_fraction: f64,
    pub consensus_k: usize,
    pub tall_weight: f64,
    pub tsvm_rank_policy: RankPolicy,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            method: MergeMethod::TaskArithmetic,
            lambda: 1.0,
            lambda_grid: default_lambda_grid(),
            ties_keep_fraction: 0.2,
            consensus_k: 2,
            tall_weight: 1.0,
            tsvm_rank_policy: RankPolicy::Auto,
        }
    }
}

impl MergeConfig {
    pub fn with_method(method: MergeMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }
}

/// Binary mask aligned to a parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVector {
    pub bits: Vec<bool>,
}

impl MaskVector {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().filter(|b| **b).count() as f64 / self.bits.len() as f64
    }
}

fn check_set(taus: &[TaskVector]) -> Result<()> {
    let first = taus
        .first()
        .ok_or_else(|| crate::Error::Domain("empty task-vector set".into()))?;
    for t in &taus[1..] {
        first.delta.check_compatible(&t.delta)?;
    }
    Ok(())
}

fn check_pre(theta_pre: &ParamVector, taus: &[TaskVector]) -> Result<()> {
    check_set(taus)?;
    theta_pre.check_compatible(&taus[0].delta)
}

fn sum_deltas(taus: &[TaskVector]) -> Vec<f64> {
    let mut acc = vec![0.0; taus[0].delta.len()];
    for t in taus {
        acc.iter_mut()
            .zip(t.delta.values())
            .for_each(|(a, v)| *a += v);
    }
    acc
}

/// `θ_pre + (1/T) Σ τ_t`.
pub fn merge_uniform(theta_pre: &ParamVector, taus: &[TaskVector]) -> Result<ParamVector> {
    check_pre(theta_pre, taus)?;
    let d = ParamVector::new(taus[0].delta.shapes().clone(), sum_deltas(taus))?;
    theta_pre.add_scaled(&d, 1.0 / taus.len() as f64)
}

/// `θ_pre + λ Σ τ_t`.
pub fn merge_task_arithmetic(
    theta_pre: &ParamVector,
    taus: &[TaskVector],
    lambda: f64,
) -> Result<ParamVector> {
    check_pre(theta_pre, taus)?;
    if !(lambda >= 0.0) {
        return domain(format!("λ must be nonnegative, got {lambda}"));
    }
    let d = ParamVector::new(taus[0].delta.shapes().clone(), sum_deltas(taus))?;
    theta_pre.add_scaled(&d, lambda)
}

/// Per-task keep masks: the top `⌈keep_fraction·d⌉` entries by magnitude.
/// Equal magnitudes are ordered by index.
pub fn ties_masks(taus: &[TaskVector], keep_fraction: f64) -> Result<Vec<MaskVector>> {
    check_set(taus)?;
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return domain(format!(
            "keep fraction must lie in (0, 1], got {keep_fraction}"
        ));
    }
    let d = taus[0].delta.len();
    let k = ((keep_fraction * d as f64).ceil() as usize).min(d);
    Ok(taus
        .iter()
        .map(|t| {
            let v = t.delta.values();
            let mut idx: Vec<usize> = (0..d).collect();
            idx.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
            let mut bits = vec![false; d];
            idx[..k].iter().for_each(|&i| bits[i] = true);
            MaskVector { bits }
        })
        .collect())
}

fn ties_delta(taus: &[TaskVector], keep_fraction: f64) -> Result<Vec<f64>> {
    let masks = ties_masks(taus, keep_fraction)?;
    let d = taus[0].delta.len();
    let mut out = vec![0.0; d];
    for (j, o) in out.iter_mut().enumerate() {
        let survivors = || {
            taus.iter()
                .zip(&masks)
                .filter(|(_, m)| m.bits[j])
                .map(|(t, _)| t.delta.values()[j])
        };
        let total: f64 = survivors().sum();
        if total == 0.0 {
            continue;
        }
        let positive = total > 0.0;
        let (sum, n) = survivors()
            .filter(|v| *v != 0.0 && (*v > 0.0) == positive)
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n > 0 {
            *o = sum / n as f64;
        }
    }
    Ok(out)
}

/// Trim, elect sign, disjoint mean, scale by λ.
pub fn merge_ties(
    theta_pre: &ParamVector,
    taus: &[TaskVector],
    lambda: f64,
    keep_fraction: f64,
) -> Result<ParamVector> {
    check_pre(theta_pre, taus)?;
    let d = theta_pre.with_values(ties_delta(taus, keep_fraction)?)?;
    theta_pre.add_scaled(&d, lambda)
}

/// Per-task TALL masks: `|τ_t[j]| ≥ λ_w·|(Σ_s τ_s)[j] − τ_t[j]|`.
pub fn tall_masks(taus: &[TaskVector], tall_weight: f64) -> Result<Vec<MaskVector>> {
    check_set(taus)?;
    if !(tall_weight > 0.0) {
        return domain(format!("TALL weight must be positive, got {tall_weight}"));
    }
    let total = sum_deltas(taus);
    Ok(taus
        .iter()
        .map(|t| MaskVector {
            bits: t
                .delta
                .values()
                .iter()
                .zip(&total)
                .map(|(v, s)| v.abs() >= tall_weight * (s - v).abs())
                .collect(),
        })
        .collect())
}

/// Coordinates selected by at least `k` TALL masks.
pub fn consensus_mask(taus: &[TaskVector], tall_weight: f64, k: usize) -> Result<MaskVector> {
    if k == 0 {
        return domain("consensus k must be at least 1");
    }
    let masks = tall_masks(taus, tall_weight)?;
    let d = taus[0].delta.len();
    Ok(MaskVector {
        bits: (0..d)
            .map(|j| masks.iter().filter(|m| m.bits[j]).count() >= k)
            .collect(),
    })
}

fn consensus_delta(taus: &[TaskVector], tall_weight: f64, k: usize) -> Result<Vec<f64>> {
    let mask = consensus_mask(taus, tall_weight, k)?;
    let mut out = sum_deltas(taus);
    out.iter_mut()
        .zip(&mask.bits)
        .filter(|(_, b)| !**b)
        .for_each(|(o, _)| *o = 0.0);
    Ok(out)
}

/// `θ_pre + λ Σ_t m_cons ⊙ τ_t`.
pub fn merge_consensus(
    theta_pre: &ParamVector,
    taus: &[TaskVector],
    lambda: f64,
    tall_weight: f64,
    k: usize,
) -> Result<ParamVector> {
    check_pre(theta_pre, taus)?;
    let d = theta_pre.with_values(consensus_delta(taus, tall_weight, k)?)?;
    theta_pre.add_scaled(&d, lambda)
}

const WHITEN_FLOOR: f64 = 1e-12;
const WHITEN_REG: f64 = 1e-10;

/// `M (MᵀM)^{-1/2}`. The flag reports a rank-deficient Gram matrix, which is
/// regularised with `1e-10·I`.
pub fn whiten(m: &DenseMatrix) -> Result<(DenseMatrix, bool)> {
    let gram = m.transpose().matmul(m)?;
    let sym = gram.add(&gram.transpose())?.scale(0.5);
    let (w, deficient) = inv_sqrt_psd(&sym, WHITEN_FLOOR, WHITEN_REG)?;
    Ok((m.matmul(&w)?, deficient))
}

fn tsvm_layer(
    blocks: &[&[f64]],
    rows: usize,
    cols: usize,
    policy: RankPolicy,
    name: &str,
) -> Result<Vec<f64>> {
    let r = policy.rank(rows, cols, blocks.len());
    let mut us = Vec::with_capacity(blocks.len());
    let mut vs = Vec::with_capacity(blocks.len());
    let mut sigma = Vec::new();
    for b in blocks {
        let svd = svd_thin(&DenseMatrix::new(rows, cols, b.to_vec())?)?.truncate(r);
        sigma.extend_from_slice(&svd.s);
        us.push(svd.u);
        vs.push(svd.v);
    }
    let (u_hat, du) = whiten(&DenseMatrix::hstack(&us.iter().collect::<Vec<_>>())?)?;
    let (v_hat, dv) = whiten(&DenseMatrix::hstack(&vs.iter().collect::<Vec<_>>())?)?;
    if du || dv {
        warn!("tsvm layer {name}: stacked factors are rank deficient; regularised with {WHITEN_REG:e}·I");
    }
    let mut out = vec![0.0; rows * cols];
    for (k, s) in sigma.iter().enumerate() {
        if *s == 0.0 {
            continue;
        }
        for i in 0..rows {
            let us_ik = u_hat.get(i, k) * s;
            for (j, o) in out[i * cols..(i + 1) * cols].iter_mut().enumerate() {
                *o += us_ik * v_hat.get(j, k);
            }
        }
    }
    Ok(out)
}

fn tsvm_delta(taus: &[TaskVector], policy: RankPolicy) -> Result<Vec<f64>> {
    let shapes = taus[0].delta.shapes();
    let mut out = sum_deltas(taus);
    for (i, e) in shapes.entries().iter().enumerate() {
        if e.kind != ParamKind::Weight || e.rows < 2 || e.cols < 2 {
            continue;
        }
        let blocks: Vec<&[f64]> = taus.iter().map(|t| t.delta.block(i)).collect();
        let merged = tsvm_layer(&blocks, e.rows, e.cols, policy, &e.name)?;
        out[shapes.range(i)].copy_from_slice(&merged);
    }
    Ok(out)
}

/// Per-layer SVD, whitening of the stacked singular vectors, reconstruction,
/// scale by λ. Bias and vector-shaped blocks fall back to task arithmetic.
pub fn merge_tsvm(
    theta_pre: &ParamVector,
    taus: &[TaskVector],
    lambda: f64,
    policy: RankPolicy,
) -> Result<ParamVector> {
    check_pre(theta_pre, taus)?;
    let d = theta_pre.with_values(tsvm_delta(taus, policy)?)?;
    theta_pre.add_scaled(&d, lambda)
}

/// The method's merged displacement before scaling by λ. Every λ-dependent
/// method merges to `θ_pre + λ·D`; for uniform averaging `D` is the mean and
/// λ is ignored.
pub fn merged_direction(taus: &[TaskVector], cfg: &MergeConfig) -> Result<ParamVector> {
    check_set(taus)?;
    let values = match cfg.method {
        MergeMethod::Uniform => {
            let n = taus.len() as f64;
            sum_deltas(taus).into_iter().map(|v| v / n).collect()
        }
        MergeMethod::TaskArithmetic => sum_deltas(taus),
        MergeMethod::Ties => ties_delta(taus, cfg.ties_keep_fraction)?,
        MergeMethod::Consensus => consensus_delta(taus, cfg.tall_weight, cfg.consensus_k)?,
        MergeMethod::Tsvm => tsvm_delta(taus, cfg.tsvm_rank_policy)?,
    };
    taus[0].delta.with_values(values)
}

/// Dispatches on `cfg.method` with `cfg.lambda`.
pub fn merge(
    theta_pre: &ParamVector,
    taus: &[TaskVector],
    cfg: &MergeConfig,
) -> Result<ParamVector> {
    match cfg.method {
        MergeMethod::Uniform => merge_uniform(theta_pre, taus),
        MergeMethod::TaskArithmetic => merge_task_arithmetic(theta_pre, taus, cfg.lambda),
        MergeMethod::Ties => merge_ties(theta_pre, taus, cfg.lambda, cfg.ties_keep_fraction),
        MergeMethod::Consensus => merge_consensus(
            theta_pre,
            taus,
            cfg.lambda,
            cfg.tall_weight,
            cfg.consensus_k,
        ),
        MergeMethod::Tsvm => merge_tsvm(theta_pre, taus, cfg.lambda, cfg.tsvm_rank_policy),
    }
}

/// `cos(Σ_s τ_s, τ_t)` for every task.
pub fn cosine_to_sum(taus: &[TaskVector]) -> Result<Vec<f64>> {
    check_set(taus)?;
    let total = sum_deltas(taus);
    taus.iter()
        .map(|t| cosine_similarity(&total, t.delta.values()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub best: f64,
    pub scores: Vec<(f64, f64)>,
}

/// Grid search for the λ maximising `score`; ties go to the smaller λ.
pub fn tune_lambda(
    grid: &[f64],
    mut score: impl FnMut(f64) -> Result<f64>,
) -> Result<LambdaSearch> {
    if grid.is_empty() {
        return domain("empty λ grid");
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut scores = Vec::with_capacity(sorted.len());
    let mut best = (sorted[0], f64::NEG_INFINITY);
    for &lam in &sorted {
        let s = score(lam)?;
        if s > best.1 {
            best = (lam, s);
        }
        scores.push((lam, s));
    }
    Ok(LambdaSearch {
        best: best.0,
        scores,
    })
}

/// Tunes λ for `cfg.method` by mean accuracy over the validation sets.
pub fn tune_lambda_on(
    spec: &ModelSpec,
    theta_pre: &ParamVector,
    taus: &[TaskVector],
    cfg: &MergeConfig,
    validation: &[&LabeledSet],
) -> Result<LambdaSearch> {
    if validation.is_empty() {
        return domain("no validation sets");
    }
    let direction = merged_direction(taus, cfg)?;
    let grid = if cfg.method.uses_lambda() {
        cfg.lambda_grid.clone()
    } else {
        vec![1.0]
    };
    tune_lambda(&grid, |lam| {
        let theta = theta_pre.add_scaled(&direction, lam)?;
        let mut total = 0.0;
        for v in validation {
            total += accuracy(spec, &theta, v)?;
        }
        Ok(total / validation.len() as f64)
    })
}
