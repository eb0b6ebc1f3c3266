//! A small fully-connected classifier over flat parameter vectors.
//!
//! Parameters live in a [`ParamVector`]: one flat `f64` buffer plus a shared
//! [`ShapeMap`] describing the weight and bias blocks in order. Every merging
//! and distillation routine works on this flat form.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Head, Targets};
use crate::error::{domain, Result};
use crate::linalg::{dot, entropy_of, norm, softmax_unchecked, DenseMatrix};
use crate::loss::{ce_with_grad, focal_with_grad, kd_with_grad, soft_ce_with_grad, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dims: vec![32, 32],
            num_classes: 4,
            activation: Activation::Relu,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_dims.contains(&0) {
            return domain("model dimensions must all be at least 1");
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self
            .hidden_dims
            .iter()
            .chain(std::iter::once(&self.num_classes))
        {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    pub fn shape_map(&self) -> ShapeMap {
        let mut entries = Vec::new();
        let n = self.hidden_dims.len();
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            let name = if l == n {
                "head".to_string()
            } else {
                format!("hidden{l}")
            };
            entries.push(ShapeEntry {
                name: name.clone(),
                kind: ParamKind::Weight,
                rows: fan_out,
                cols: fan_in,
            });
            entries.push(ShapeEntry {
                name,
                kind: ParamKind::Bias,
                rows: fan_out,
                cols: 1,
            });
        }
        ShapeMap::new(entries)
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub name: String,
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
}

impl ShapeEntry {
    pub fn size(&self) -> usize {
        self.rows * self.cols
    }
}

/// Ordered block layout of a flat parameter vector. Cheap to clone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeMap {
    entries: Arc<Vec<ShapeEntry>>,
    offsets: Arc<Vec<usize>>,
}

impl ShapeMap {
    pub fn new(entries: Vec<ShapeEntry>) -> Self {
        let mut offsets = Vec::with_capacity(entries.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for e in &entries {
            acc += e.size();
            offsets.push(acc);
        }
        Self {
            entries: Arc::new(entries),
            offsets: Arc::new(offsets),
        }
    }

    pub fn entries(&self) -> &[ShapeEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// Flat index range of block `i`.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    fn same(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.entries, &other.entries) || self.entries == other.entries
    }
}

/// Flat parameter vector `θ ∈ R^d` with its block layout.
#[derive(Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    shapes: ShapeMap,
}

impl fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamVector")
            .field("len", &self.values.len())
            .field("blocks", &self.shapes.entries.len())
            .field("norm", &self.norm())
            .finish()
    }
}

impl ParamVector {
    pub fn new(shapes: ShapeMap, values: Vec<f64>) -> Result<Self> {
        if values.len() != shapes.total() {
            return domain(format!(
                "{} values for a shape map of size {}",
                values.len(),
                shapes.total()
            ));
        }
        Ok(Self { values, shapes })
    }

    pub fn zeros(shapes: ShapeMap) -> Self {
        Self {
            values: vec![0.0; shapes.total()],
            shapes,
        }
    }

    pub fn shapes(&self) -> &ShapeMap {
        &self.shapes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.values[self.shapes.range(i)]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        let r = self.shapes.range(i);
        &mut self.values[r]
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if !self.shapes.same(&other.shapes) {
            return domain("parameter vectors have different shape maps");
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(self.map2(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(self.map2(other, |a, b| a - b))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * s).collect(),
            shapes: self.shapes.clone(),
        }
    }

    /// `self + s·other`.
    pub fn add_scaled(&self, other: &Self, s: f64) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(self.map2(other, |a, b| a + s * b))
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.shapes.clone(), values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// ℓ2 norm of every block, in shape-map order.
    pub fn block_norms(&self) -> Vec<(ShapeEntry, f64)> {
        self.shapes
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), norm(self.block(i))))
            .collect()
    }

    fn map2(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| f(*a, *b))
                .collect(),
            shapes: self.shapes.clone(),
        }
    }
}

/// Structured dense layer: `out = W·in + b`, `W` is `fan_out × fan_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Flattens layers into a parameter vector with generic block names.
pub fn flatten(layers: &[Layer]) -> Result<ParamVector> {
    let mut entries = Vec::new();
    let mut values = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        if layer.bias.len() != layer.weight.rows() {
            return domain(format!(
                "layer {l}: bias length {} != weight rows {}",
                layer.bias.len(),
                layer.weight.rows()
            ));
        }
        let name = format!("layer{l}");
        entries.push(ShapeEntry {
            name: name.clone(),
            kind: ParamKind::Weight,
            rows: layer.weight.rows(),
            cols: layer.weight.cols(),
        });
        entries.push(ShapeEntry {
            name,
            kind: ParamKind::Bias,
            rows: layer.bias.len(),
            cols: 1,
        });
        values.extend_from_slice(layer.weight.data());
        values.extend_from_slice(&layer.bias);
    }
    ParamVector::new(ShapeMap::new(entries), values)
}

/// Inverse of [`flatten`] for any weight/bias alternating layout.
pub fn unflatten(theta: &ParamVector) -> Result<Vec<Layer>> {
    let entries = theta.shapes.entries();
    if !entries.len().is_multiple_of(2) {
        return domain("shape map must alternate weight and bias blocks");
    }
    let mut layers = Vec::with_capacity(entries.len() / 2);
    for l in 0..entries.len() / 2 {
        let (w, b) = (&entries[2 * l], &entries[2 * l + 1]);
        if w.kind != ParamKind::Weight
            || b.kind != ParamKind::Bias
            || b.rows != w.rows
            || b.cols != 1
        {
            return domain(format!(
                "block pair {l} is not a (weight, bias) pair of matching size"
            ));
        }
        layers.push(Layer {
            weight: DenseMatrix::new(w.rows, w.cols, theta.block(2 * l).to_vec())?,
            bias: theta.block(2 * l + 1).to_vec(),
        });
    }
    Ok(layers)
}

/// He-uniform weights (`U(±√(6/fan_in))`) and zero biases.
pub fn init_params<R: Rng>(spec: &ModelSpec, rng: &mut R) -> Result<ParamVector> {
    spec.validate()?;
    let shapes = spec.shape_map();
    let mut theta = ParamVector::zeros(shapes.clone());
    for (i, e) in shapes.entries().iter().enumerate() {
        if e.kind == ParamKind::Weight {
            let bound = (6.0 / e.cols as f64).sqrt();
            theta
                .block_mut(i)
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-bound..bound));
        }
    }
    Ok(theta)
}

fn check_theta(spec: &ModelSpec, theta: &ParamVector) -> Result<()> {
    let expect = spec.shape_map();
    if theta.shapes.entries() != expect.entries() {
        return domain("parameter layout does not match the model spec");
    }
    Ok(())
}

/// Activations recorded during a forward pass.
struct Trace {
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    /// Post-activations per layer; the last entry is the logit vector.
    post: Vec<Vec<f64>>,
}

fn forward_trace(spec: &ModelSpec, theta: &ParamVector, x: &[f64]) -> Trace {
    let dims = spec.layer_dims();
    let last = dims.len() - 1;
    let mut pre = Vec::with_capacity(dims.len());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(dims.len());
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = theta.block(2 * l);
        let b = theta.block(2 * l + 1);
        let input: &[f64] = if l == 0 { x } else { &post[l - 1] };
        let z: Vec<f64> = (0..fan_out)
            .map(|o| dot(&w[o * fan_in..(o + 1) * fan_in], input) + b[o])
            .collect();
        let a = if l == last {
            z.clone()
        } else {
            z.iter().map(|&v| spec.activation.apply(v)).collect()
        };
        pre.push(z);
        post.push(a);
    }
    Trace { pre, post }
}

/// Logits `f(x; θ)`.
pub fn forward_logits(spec: &ModelSpec, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    check_theta(spec, theta)?;
    if x.len() != spec.input_dim {
        return domain(format!(
            "input length {} != input_dim {}",
            x.len(),
            spec.input_dim
        ));
    }
    Ok(forward_trace(spec, theta, x)
        .post
        .pop()
        .expect("at least one layer"))
}

/// Logits for every row of a row-major input buffer.
pub fn forward_many(
    spec: &ModelSpec,
    theta: &ParamVector,
    inputs: &[f64],
) -> Result<Vec<Vec<f64>>> {
    check_theta(spec, theta)?;
    if !inputs.len().is_multiple_of(spec.input_dim) {
        return domain("input buffer is not a multiple of input_dim");
    }
    Ok(inputs
        .chunks(spec.input_dim)
        .map(|x| {
            forward_trace(spec, theta, x)
                .post
                .pop()
                .expect("at least one layer")
        })
        .collect())
}

fn check_batch(spec: &ModelSpec, batch: &Batch, objective: &Objective) -> Result<()> {
    if batch.is_empty() {
        return domain("empty batch");
    }
    if batch.dim != spec.input_dim || batch.inputs.len() != batch.dim * batch.len() {
        return domain("batch inputs do not match the model input dimension");
    }
    batch.head.check(spec.num_classes)?;
    objective.validate()?;
    let c = batch.head.len;
    match (&batch.targets, objective) {
        (Targets::Hard(y), Objective::CrossEntropy { .. } | Objective::Focal { .. }) => {
            if let Some(bad) = y.iter().find(|&&v| v >= c) {
                return domain(format!(
                    "class index {bad} out of range for a {c}-class head"
                ));
            }
        }
        (Targets::Soft(q), Objective::SoftCrossEntropy) => {
            if q.iter().any(|v| v.len() != c) {
                return domain("soft target length does not match the head");
            }
        }
        (Targets::Teacher(z), Objective::Distill { .. }) => {
            if z.iter().any(|v| v.len() != c) {
                return domain("teacher logit length does not match the head");
            }
        }
        _ => return domain("objective is incompatible with the batch targets"),
    }
    Ok(())
}

fn sample_loss(
    objective: &Objective,
    targets: &Targets,
    i: usize,
    window: &[f64],
) -> (f64, Vec<f64>) {
    match (objective, targets) {
        (Objective::CrossEntropy { smoothing }, Targets::Hard(y)) => {
            ce_with_grad(window, y[i], *smoothing)
        }
        (Objective::Focal { gamma }, Targets::Hard(y)) => focal_with_grad(window, y[i], *gamma),
        (Objective::SoftCrossEntropy, Targets::Soft(q)) => soft_ce_with_grad(window, &q[i]),
        (
            Objective::Distill {
                t_teacher,
                t_student,
            },
            Targets::Teacher(z),
        ) => kd_with_grad(&z[i], window, *t_teacher, *t_student),
        _ => unreachable!("checked by check_batch"),
    }
}

/// Mean batch loss without gradients.
pub fn batch_loss(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: &Batch,
    objective: &Objective,
) -> Result<f64> {
    check_theta(spec, theta)?;
    check_batch(spec, batch, objective)?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let logits = forward_trace(spec, theta, batch.input(i))
            .post
            .pop()
            .expect("at least one layer");
        total += sample_loss(objective, &batch.targets, i, batch.head.slice(&logits)).0;
    }
    Ok(total / batch.len() as f64)
}

/// Mean batch loss and its exact gradient with respect to `θ`.
pub fn grad_loss(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: &Batch,
    objective: &Objective,
) -> Result<(f64, ParamVector)> {
    grad_loss_stats(spec, theta, batch, objective).map(|s| (s.loss, s.grad))
}

pub(crate) struct GradStats {
    pub loss: f64,
    pub grad: ParamVector,
    /// Mean predictive entropy (temperature 1) over the batch's head window.
    pub entropy: f64,
}

pub(crate) fn grad_loss_stats(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: &Batch,
    objective: &Objective,
) -> Result<GradStats> {
    check_theta(spec, theta)?;
    check_batch(spec, batch, objective)?;
    let dims = spec.layer_dims();
    let last = dims.len() - 1;
    let head: Head = batch.head;
    let mut grad = ParamVector::zeros(theta.shapes.clone());
    let mut total = 0.0;
    let mut entropy = 0.0;
    let scale = 1.0 / batch.len() as f64;

    for i in 0..batch.len() {
        let x = batch.input(i);
        let trace = forward_trace(spec, theta, x);
        let window = head.slice(&trace.post[last]);
        entropy += entropy_of(&softmax_unchecked(window, 1.0));
        let (loss, dwin) = sample_loss(objective, &batch.targets, i, window);
        total += loss;

        let mut delta = vec![0.0; spec.num_classes];
        for (k, g) in dwin.iter().enumerate() {
            delta[head.start + k] = g * scale;
        }
        for l in (0..=last).rev() {
            let (fan_in, fan_out) = dims[l];
            let input: &[f64] = if l == 0 { x } else { &trace.post[l - 1] };
            let r = theta.shapes.range(2 * l);
            {
                let gw = &mut grad.values[r.clone()];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (gwi, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                        *gwi += d * xi;
                    }
                }
            }
            let rb = theta.shapes.range(2 * l + 1);
            grad.values[rb]
                .iter_mut()
                .zip(&delta)
                .for_each(|(g, d)| *g += d);
            if l == 0 {
                break;
            }
            let w = &theta.values[r];
            let mut back = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (bj, wj) in back.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *bj += d * wj;
                }
            }
            for (j, bj) in back.iter_mut().enumerate() {
                *bj *= spec
                    .activation
                    .derivative(trace.pre[l - 1][j], trace.post[l - 1][j]);
            }
            delta = back;
        }
    }
    Ok(GradStats {
        loss: total * scale,
        grad,
        entropy: entropy * scale,
    })
}
