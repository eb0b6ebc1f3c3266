//! Dense linear algebra and probability-space primitives.
//!
//! Everything here works in `f64`. Matrices are small (a few hundred rows at
//! most), so the decompositions favour simple, deterministic Jacobi sweeps
//! over blocked algorithms.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

const SVD_MAX_SWEEPS: usize = 200;
const EIGEN_MAX_SWEEPS: usize = 200;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return domain(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            ));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return domain(format!("non-finite matrix entry at flat index {bad}"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return domain("ragged rows");
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return domain(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return domain(format!(
                "matvec: vector length {} != cols {}",
                x.len(),
                self.cols
            ));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return domain("elementwise shape mismatch");
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Keeps only the listed columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, cols.len());
        for r in 0..self.rows {
            for (j, &c) in cols.iter().enumerate() {
                out.data[r * cols.len() + j] = self.get(r, c);
            }
        }
        out
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hstack(blocks: &[&DenseMatrix]) -> Result<Self> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if blocks.iter().any(|b| b.rows != rows) {
            return domain("hstack: row counts differ");
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut out = Self::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for b in blocks {
                out.data[r * cols + off..r * cols + off + b.cols].copy_from_slice(b.row(r));
                off += b.cols;
            }
        }
        Ok(out)
    }

    /// `max |AᵀA − I|` over all entries.
    pub fn orthonormality_residual(&self) -> f64 {
        let gram = self
            .transpose()
            .matmul(self)
            .expect("square by construction");
        gram.sub(&Self::identity(self.cols))
            .expect("same shape")
            .max_abs()
    }

    fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.max_abs().max(1.0);
        (0..self.rows)
            .all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol * scale))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a·b / (‖a‖‖b‖)`. Zero vectors are rejected rather than mapped to 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return domain(format!(
            "cosine_similarity: lengths {} and {} differ",
            a.len(),
            b.len()
        ));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return domain("cosine_similarity of a zero-norm vector is undefined");
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// A probability vector: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return domain("empty probability vector");
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return domain("probabilities must be finite and nonnegative");
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return domain(format!("probabilities sum to {sum}, not 1"));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut p = vec![0.0; n];
        p[k] = 1.0;
        Self(p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Log-softmax of `z / t`, stabilised by subtracting the maximum.
pub fn log_softmax_temp(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return domain(format!("temperature must be positive, got {t}"));
    }
    if logits.is_empty() {
        return domain("empty logit vector");
    }
    Ok(log_softmax_unchecked(logits, t))
}

pub(crate) fn log_softmax_unchecked(logits: &[f64], t: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let shifted: Vec<f64> = logits.iter().map(|z| (z - max) / t).collect();
    let lse = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|s| s - lse).collect()
}

pub(crate) fn softmax_unchecked(logits: &[f64], t: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let mut e: Vec<f64> = logits.iter().map(|z| ((z - max) / t).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= sum);
    e
}

/// `softmax(z / t)`.
pub fn softmax_temp(logits: &[f64], t: f64) -> Result<ProbVector> {
    if !(t > 0.0) || !t.is_finite() {
        return domain(format!("temperature must be positive, got {t}"));
    }
    if logits.is_empty() || logits.iter().any(|z| !z.is_finite()) {
        return domain("logits must be nonempty and finite");
    }
    Ok(ProbVector(softmax_unchecked(logits, t)))
}

/// `KL(p ‖ q) = Σ p ln(p / q)` with `q` floored at [`PROB_FLOOR`].
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return domain(format!(
            "kl_divergence: lengths {} and {} differ",
            p.len(),
            q.len()
        ));
    }
    let kl: f64 =
        p.0.iter()
            .zip(&q.0)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
            .sum();
    Ok(kl.max(0.0))
}

/// Shannon entropy in nats.
pub fn entropy(p: &ProbVector) -> f64 {
    entropy_of(&p.0)
}

pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// Thin singular value decomposition `M = U diag(S) Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DenseMatrix,
    pub s: Vec<f64>,
    pub v: DenseMatrix,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Keeps the leading `r` singular triplets.
    pub fn truncate(&self, r: usize) -> Self {
        let keep: Vec<usize> = (0..r.min(self.s.len())).collect();
        Self {
            u: self.u.select_columns(&keep),
            s: self.s[..keep.len()].to_vec(),
            v: self.v.select_columns(&keep),
        }
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.s.iter().enumerate() {
                let v = us.get(r, c) * s;
                us.set(r, c, v);
            }
        }
        us.matmul(&self.v.transpose())
            .expect("compatible by construction")
    }
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// `U` is `m×k`, `V` is `n×k` with `k = min(m, n)`; both have orthonormal
/// columns (left vectors for zero singular values are completed to an
/// orthonormal set). Singular values are sorted in descending order.
pub fn svd_thin(m: &DenseMatrix) -> Result<Svd> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return domain("svd_thin: non-finite entries");
    }
    if m.rows >= m.cols {
        svd_tall(m)
    } else {
        let t = svd_tall(&m.transpose())?;
        Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        })
    }
}

fn svd_tall(m: &DenseMatrix) -> Result<Svd> {
    let (rows, n) = (m.rows, m.cols);
    // Column-major working copies.
    let mut a: Vec<Vec<f64>> = (0..n).map(|c| m.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    let tol = 1e-15;
    // Columns below this squared norm are numerically zero; rotating them only stirs rounding noise.
    let negligible = {
        let frob2: f64 = a.iter().map(|c| dot(c, c)).sum();
        (f64::EPSILON * f64::EPSILON) * frob2
    };
    let mut converged = n < 2;
    let mut sweeps = 0;
    let mut last_off = 0.0;
    while !converged && sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        last_off = 0.0_f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                let scale = (alpha * beta).sqrt();
                if alpha <= negligible || beta <= negligible || gamma.abs() <= tol * scale {
                    continue;
                }
                last_off = last_off.max(gamma.abs() / scale);
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut a, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "one-sided Jacobi SVD did not converge after {sweeps} sweeps \
             ({rows}x{n}, last relative off-diagonal {last_off:.3e})"
        )));
    }

    let sigma: Vec<f64> = a.iter().map(|col| norm(col)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let smax = order.first().map_or(0.0, |&i| sigma[i]);
    let cutoff = smax * f64::EPSILON * (rows.max(n) as f64);

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if sigma[j] > cutoff && sigma[j] > 0.0 {
            u_cols.push(a[j].iter().map(|x| x / sigma[j]).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
            deficient.push(slot);
        }
    }
    // Re-orthogonalise in descending order; only weakly conditioned columns move.
    for j in 0..n {
        if deficient.contains(&j) {
            continue;
        }
        let (head, tail) = u_cols.split_at_mut(j);
        let col = &mut tail[0];
        for prev in head
            .iter()
            .enumerate()
            .filter(|(i, _)| !deficient.contains(i))
            .map(|(_, c)| c)
        {
            let proj = dot(prev, col);
            col.iter_mut().zip(prev).for_each(|(x, p)| *x -= proj * p);
        }
        let nrm = norm(col);
        col.iter_mut().for_each(|x| *x /= nrm);
    }
    for &slot in &deficient {
        u_cols[slot] = complete_basis(&u_cols, slot, rows)?;
    }

    let k = n;
    let mut u = DenseMatrix::zeros(rows, k);
    let mut vm = DenseMatrix::zeros(n, k);
    let mut s = Vec::with_capacity(k);
    for (slot, &j) in order.iter().enumerate() {
        for r in 0..rows {
            u.set(r, slot, u_cols[slot][r]);
        }
        for r in 0..n {
            vm.set(r, slot, v[j][r]);
        }
        s.push(sigma[j]);
    }
    Ok(Svd { u, s, v: vm })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Finds a unit vector orthogonal to every other column. Columns not yet
/// filled are zero and drop out of the projections.
fn complete_basis(cols: &[Vec<f64>], slot: usize, rows: usize) -> Result<Vec<f64>> {
    let filled: Vec<&Vec<f64>> = cols
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != slot)
        .map(|(_, c)| c)
        .collect();
    // The coordinate vector with the largest residual; some residual is at least 1/√rows.
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..rows {
        let mut cand = vec![0.0; rows];
        cand[e] = 1.0;
        for _ in 0..2 {
            for f in &filled {
                let proj = dot(f, &cand);
                cand.iter_mut()
                    .zip(f.iter())
                    .for_each(|(x, p)| *x -= proj * p);
            }
        }
        let nrm = norm(&cand);
        if best.as_ref().is_none_or(|(b, _)| nrm > *b) {
            best = Some((nrm, cand));
        }
    }
    match best {
        Some((nrm, mut cand)) if nrm > 1e-6 => {
            cand.iter_mut().for_each(|x| *x /= nrm);
            Ok(cand)
        }
        _ => Err(Error::Numeric(
            "could not complete orthonormal basis".into(),
        )),
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// columns.
pub fn sym_eigen(a: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    if !a.is_symmetric(1e-10) {
        return domain("sym_eigen: matrix is not symmetric");
    }
    let n = a.rows;
    let mut m = a.clone();
    let mut q = DenseMatrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    let mut sweeps = 0;
    loop {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        if sweeps >= EIGEN_MAX_SWEEPS {
            return Err(Error::Numeric(format!(
                "symmetric Jacobi did not converge after {sweeps} sweeps (off-diagonal {off:.3e})"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for r in p + 1..n {
                let apq = m.get(p, r);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m.get(r, r) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkr) = (m.get(k, p), m.get(k, r));
                    m.set(k, p, c * mkp - s * mkr);
                    m.set(k, r, s * mkp + c * mkr);
                }
                for k in 0..n {
                    let (mpk, mrk) = (m.get(p, k), m.get(r, k));
                    m.set(p, k, c * mpk - s * mrk);
                    m.set(r, k, s * mpk + c * mrk);
                }
                for k in 0..n {
                    let (qkp, qkr) = (q.get(k, p), q.get(k, r));
                    q.set(k, p, c * qkp - s * qkr);
                    q.set(k, r, s * qkp + c * qkr);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)));
    let vals = order.iter().map(|&i| m.get(i, i)).collect();
    Ok((vals, q.select_columns(&order)))
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_symmetric(1e-10) {
        return domain("cholesky: matrix is not symmetric");
    }
    let n = a.rows;
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k).powi(2);
        }
        if !(d > 0.0) {
            return domain(format!(
                "cholesky: matrix is not positive definite (pivot {j} = {d:.3e})"
            ));
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the Cholesky factor `L`.
pub fn cholesky_solve(l: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l.get(i, k) * y[k]).sum();
        y[i] = (b[i] - s) / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l.get(k, i) * x[k]).sum();
        x[i] = (y[i] - s) / l.get(i, i);
    }
    x
}

/// Solves `A x = b` for symmetric positive-definite `A`.
pub fn solve_spd(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.rows {
        return domain("solve_spd: right-hand side length mismatch");
    }
    Ok(cholesky_solve(&cholesky(a)?, b))
}

/// Inverse of a symmetric positive-definite matrix.
pub fn inverse_spd(a: &DenseMatrix) -> Result<DenseMatrix> {
    let l = cholesky(a)?;
    let n = a.rows;
    let mut inv = DenseMatrix::zeros(n, n);
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        let x = cholesky_solve(&l, &e);
        for r in 0..n {
            inv.set(r, c, x[r]);
        }
    }
    // Symmetrise away rounding asymmetry.
    let t = inv.transpose();
    Ok(inv.add(&t)?.scale(0.5))
}

/// Largest singular value.
pub fn spectral_norm(a: &DenseMatrix) -> Result<f64> {
    Ok(svd_thin(a)?.s.first().copied().unwrap_or(0.0))
}

/// Symmetric inverse square root `G^{-1/2}` of a positive semi-definite matrix.
///
/// Eigenvalues below `floor · λ_max` are treated as rank deficiency: `reg` is
/// added to the whole spectrum and the returned flag is `true`.
pub fn inv_sqrt_psd(g: &DenseMatrix, floor: f64, reg: f64) -> Result<(DenseMatrix, bool)> {
    let (vals, q) = sym_eigen(g)?;
    let lmax = vals.last().copied().unwrap_or(0.0).max(0.0);
    let deficient = vals
        .first()
        .is_some_and(|&l| l <= floor * lmax.max(f64::MIN_POSITIVE));
    let n = g.rows;
    let mut out = DenseMatrix::zeros(n, n);
    for (k, &lam) in vals.iter().enumerate() {
        let lam = lam.max(0.0) + if deficient { reg } else { 0.0 };
        if lam <= 0.0 {
            continue;
        }
        let w = 1.0 / lam.sqrt();
        for i in 0..n {
            let qi = q.get(i, k) * w;
            if qi == 0.0 {
                continue;
            }
            for j in 0..n {
                let v = out.get(i, j) + qi * q.get(j, k);
                out.set(i, j, v);
            }
        }
    }
    Ok((out, deficient))
}
