//! Quadratic two-task model of calibrated fine-tuning.
//!
//! Each task has a cross-entropy surrogate `J(θ) = g·θ + ½θᵀHθ` and a
//! calibration penalty with gradient `b` and Hessian `A` at the base point
//! `θ₀ = 0`. The calibrated objective is `J + λ_cal·C`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{dot, inverse_spd, norm, solve_spd, spectral_norm, sym_eigen, DenseMatrix};

pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadTask {
    h: DenseMatrix,
    g: Vec<f64>,
    a: DenseMatrix,
    b: Vec<f64>,
    lambda_cal: f64,
}

impl QuadTask {
    pub fn new(
        h: DenseMatrix,
        g: Vec<f64>,
        a: DenseMatrix,
        b: Vec<f64>,
        lambda_cal: f64,
    ) -> Result<Self> {
        let n = h.rows();
        if h.cols() != n || a.rows() != n || a.cols() != n || g.len() != n || b.len() != n || n == 0
        {
            return domain("quadratic task dimensions are inconsistent");
        }
        if !(lambda_cal >= 0.0) {
            return domain(format!("λ_cal must be nonnegative, got {lambda_cal}"));
        }
        let (vals, _) = sym_eigen(&h)?;
        if !(vals[0] > 0.0) {
            return domain(format!(
                "H is not positive definite (min eigenvalue {:.3e})",
                vals[0]
            ));
        }
        // Rejects a non-symmetric A.
        sym_eigen(&a)?;
        Ok(Self {
            h,
            g,
            a,
            b,
            lambda_cal,
        })
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }
    pub fn h(&self) -> &DenseMatrix {
        &self.h
    }
    pub fn g(&self) -> &[f64] {
        &self.g
    }
    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }
    pub fn b(&self) -> &[f64] {
        &self.b
    }
    pub fn lambda_cal(&self) -> f64 {
        self.lambda_cal
    }

    pub fn with_lambda(&self, lambda_cal: f64) -> Result<Self> {
        if !(lambda_cal >= 0.0) {
            return domain(format!("λ_cal must be nonnegative, got {lambda_cal}"));
        }
        Ok(Self {
            lambda_cal,
            ..self.clone()
        })
    }

    /// `g·θ + ½θᵀHθ`.
    pub fn ce_loss(&self, theta: &[f64]) -> f64 {
        let h_theta = self.h.matvec(theta).expect("dimension checked");
        dot(&self.g, theta) + 0.5 * dot(theta, &h_theta)
    }

    /// `J^CE + λ_cal·(b·θ + ½θᵀAθ)`.
    pub fn calibrated_loss(&self, theta: &[f64]) -> f64 {
        let a_theta = self.a.matvec(theta).expect("dimension checked");
        self.ce_loss(theta) + self.lambda_cal * (dot(&self.b, theta) + 0.5 * dot(theta, &a_theta))
    }

    /// `H + λ_cal·A`.
    pub fn calibrated_hessian(&self) -> DenseMatrix {
        self.h
            .add(&self.a.scale(self.lambda_cal))
            .expect("dimension checked")
    }

    fn hinv(&self, v: &[f64]) -> Result<Vec<f64>> {
        solve_spd(&self.h, v)
    }
}

fn check_condition(h: &DenseMatrix) -> Result<()> {
    let (vals, _) = sym_eigen(h)?;
    let (lo, hi) = (vals[0], vals[vals.len() - 1]);
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::Numeric(format!(
            "H is ill-conditioned (eigenvalues {lo:.3e} .. {hi:.3e})"
        )));
    }
    Ok(())
}

/// `τ^CE = −H⁻¹g`.
pub fn newton_task_vector(q: &QuadTask) -> Result<Vec<f64>> {
    check_condition(&q.h)?;
    Ok(q.hinv(&q.g)?.into_iter().map(|v| -v).collect())
}

/// `−(H + λA)⁻¹(g + λb)`.
pub fn calibrated_task_vector_exact(q: &QuadTask) -> Result<Vec<f64>> {
    let hc = q.calibrated_hessian();
    let (vals, _) = sym_eigen(&hc)?;
    if !(vals[0] > 0.0) {
        return domain(format!(
            "calibrated Hessian is not positive definite (min eigenvalue {:.3e})",
            vals[0]
        ));
    }
    let rhs: Vec<f64> =
        q.g.iter()
            .zip(&q.b)
            .map(|(g, b)| g + q.lambda_cal * b)
            .collect();
    Ok(solve_spd(&hc, &rhs)?.into_iter().map(|v| -v).collect())
}

/// `δ = −λH⁻¹b`.
pub fn calibration_shift(q: &QuadTask) -> Result<Vec<f64>> {
    Ok(q.hinv(&q.b)?
        .into_iter()
        .map(|v| -q.lambda_cal * v)
        .collect())
}

/// `τ^CE + δ`, plus `λH⁻¹AH⁻¹g` when `full` is set.
pub fn calibrated_task_vector_firstorder(q: &QuadTask, full: bool) -> Result<Vec<f64>> {
    let mut tau: Vec<f64> = newton_task_vector(q)?
        .iter()
        .zip(calibration_shift(q)?)
        .map(|(t, d)| t + d)
        .collect();
    if full {
        let hg = q.hinv(&q.g)?;
        let extra = q.hinv(&q.a.matvec(&hg)?)?;
        tau.iter_mut()
            .zip(extra)
            .for_each(|(t, e)| *t += q.lambda_cal * e);
    }
    Ok(tau)
}

/// Truncated Neumann series `Σ_{k ≤ order} (−λH⁻¹A)^k H⁻¹` for `(H + λA)⁻¹`.
pub fn neumann_inverse(
    h: &DenseMatrix,
    a: &DenseMatrix,
    lambda_cal: f64,
    order: usize,
) -> Result<DenseMatrix> {
    let hinv = inverse_spd(h)?;
    let x = hinv.matmul(a)?.scale(lambda_cal);
    let radius = spectral_norm(&x)?;
    if radius >= 1.0 {
        return domain(format!("Neumann series diverges: ‖λH⁻¹A‖₂ = {radius:.6}"));
    }
    let mut term = hinv.clone();
    let mut total = hinv;
    for _ in 0..order {
        term = x.matmul(&term)?.scale(-1.0);
        total = total.add(&term)?;
    }
    Ok(total)
}

/// Spectral norm `‖λH⁻¹A‖₂` governing the Neumann expansion.
pub fn neumann_radius(q: &QuadTask) -> Result<f64> {
    spectral_norm(&inverse_spd(&q.h)?.matmul(&q.a)?.scale(q.lambda_cal))
}

/// Merge coefficients of `θ_merge = α·τ₁ + β_m·τ₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeCoeffs {
    pub alpha: f64,
    pub beta_m: f64,
}

impl MergeCoeffs {
    pub fn new(alpha: f64, beta_m: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta_m > 0.0) {
            return domain("merge coefficients must be strictly positive");
        }
        Ok(Self { alpha, beta_m })
    }
}

/// `(J_i(θ_merge^CAL) − J_i(θ_merge^CE), α·g_i·δ₁ + β_m·g_i·δ₂)` for `eval_task ∈ {1, 2}`.
pub fn merged_loss_delta(
    q1: &QuadTask,
    q2: &QuadTask,
    c: MergeCoeffs,
    eval_task: usize,
) -> Result<(f64, f64)> {
    if q1.dim() != q2.dim() {
        return domain("tasks have different dimensions");
    }
    let qi = match eval_task {
        1 => q1,
        2 => q2,
        _ => return domain(format!("eval_task must be 1 or 2, got {eval_task}")),
    };
    let combine = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(x, y)| c.alpha * x + c.beta_m * y)
            .collect()
    };
    let theta_ce = combine(&newton_task_vector(q1)?, &newton_task_vector(q2)?);
    let theta_cal = combine(
        &calibrated_task_vector_exact(q1)?,
        &calibrated_task_vector_exact(q2)?,
    );
    let exact = qi.ce_loss(&theta_cal) - qi.ce_loss(&theta_ce);
    let first = c.alpha * dot(&qi.g, &calibration_shift(q1)?)
        + c.beta_m * dot(&qi.g, &calibration_shift(q2)?);
    Ok((exact, first))
}

/// First-order prediction of the same loss difference linearised at the CE
/// merge point: `∇J_i(θ_merge^CE)·(α·δ₁' + β_m·δ₂')` with the full first-order
/// shifts `δ' = −λH⁻¹b + λH⁻¹AH⁻¹g`. Unlike the prediction taken at `θ₀`, its
/// error carries no `α·λ·‖τ‖` cross term and is `O(λ²)`.
pub fn merged_loss_delta_at_merge(
    q1: &QuadTask,
    q2: &QuadTask,
    c: MergeCoeffs,
    eval_task: usize,
) -> Result<f64> {
    if q1.dim() != q2.dim() {
        return domain("tasks have different dimensions");
    }
    let qi = match eval_task {
        1 => q1,
        2 => q2,
        _ => return domain(format!("eval_task must be 1 or 2, got {eval_task}")),
    };
    let shift = |q: &QuadTask| -> Result<Vec<f64>> {
        let ce = newton_task_vector(q)?;
        Ok(calibrated_task_vector_firstorder(q, true)?
            .iter()
            .zip(&ce)
            .map(|(a, b)| a - b)
            .collect())
    };
    let (t1, t2) = (newton_task_vector(q1)?, newton_task_vector(q2)?);
    let theta_ce: Vec<f64> = t1
        .iter()
        .zip(&t2)
        .map(|(a, b)| c.alpha * a + c.beta_m * b)
        .collect();
    let grad: Vec<f64> =
        qi.h.matvec(&theta_ce)?
            .iter()
            .zip(&qi.g)
            .map(|(h, g)| h + g)
            .collect();
    let (s1, s2) = (shift(q1)?, shift(q2)?);
    let step: Vec<f64> = s1
        .iter()
        .zip(&s2)
        .map(|(a, b)| c.alpha * a + c.beta_m * b)
        .collect();
    Ok(dot(&grad, &step))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub exact_delta: f64,
    pub firstorder_delta: f64,
    pub error: f64,
    /// Larger of the two tasks' `‖λH⁻¹A‖₂`.
    pub spectral_norm: f64,
}

/// [`merged_loss_delta`] with both tasks set to each `λ` in turn.
pub fn theory_sweep(
    q1: &QuadTask,
    q2: &QuadTask,
    c: MergeCoeffs,
    eval_task: usize,
    lambdas: &[f64],
) -> Result<Vec<SweepRow>> {
    lambdas
        .iter()
        .map(|&lam| {
            let (a, b) = (q1.with_lambda(lam)?, q2.with_lambda(lam)?);
            let (exact, first) = merged_loss_delta(&a, &b, c, eval_task)?;
            Ok(SweepRow {
                lambda: lam,
                exact_delta: exact,
                firstorder_delta: first,
                error: (exact - first).abs(),
                spectral_norm: neumann_radius(&a)?.max(neumann_radius(&b)?),
            })
        })
        .collect()
}

/// Random instance generator: `H = QDQᵀ` with spectrum in `h_eigs`, unit `g`
/// and `b`, and `A` either zero or SPD with spectrum in `a_eigs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadGenerator {
    pub dim: usize,
    pub h_eigs: (f64, f64),
    pub a_eigs: Option<(f64, f64)>,
    /// Multiplies the unit gradient `g`.
    pub g_scale: f64,
}

impl Default for QuadGenerator {
    fn default() -> Self {
        Self {
            dim: 4,
            h_eigs: (0.5, 4.0),
            a_eigs: Some((0.1, 0.5)),
            g_scale: 1.0,
        }
    }
}

fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> DenseMatrix {
    let data: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
    let m = DenseMatrix::new(n, n, data).expect("finite gaussian entries");
    crate::linalg::svd_thin(&m)
        .expect("jacobi converges on small gaussian matrices")
        .u
}

fn random_unit<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let nv = norm(&v);
        if nv > 1e-8 {
            return v.into_iter().map(|x| x / nv).collect();
        }
    }
}

fn random_spd<R: Rng>(n: usize, eigs: (f64, f64), rng: &mut R) -> DenseMatrix {
    let q = random_orthogonal(n, rng);
    let d: Vec<f64> = (0..n).map(|_| rng.random_range(eigs.0..=eigs.1)).collect();
    let qd = q.matmul(&DenseMatrix::from_diag(&d)).expect("square");
    let m = qd.matmul(&q.transpose()).expect("square");
    m.add(&m.transpose()).expect("square").scale(0.5)
}

impl QuadGenerator {
    pub fn sample<R: Rng>(&self, lambda_cal: f64, rng: &mut R) -> Result<QuadTask> {
        if self.dim == 0 || !(self.h_eigs.0 > 0.0 && self.h_eigs.1 >= self.h_eigs.0) {
            return domain("generator needs dim ≥ 1 and a positive H spectrum");
        }
        let h = random_spd(self.dim, self.h_eigs, rng);
        let g = random_unit(self.dim, rng)
            .into_iter()
            .map(|v| v * self.g_scale)
            .collect();
        let b = random_unit(self.dim, rng);
        let a = match self.a_eigs {
            Some(e) => random_spd(self.dim, e, rng),
            None => DenseMatrix::zeros(self.dim, self.dim),
        };
        QuadTask::new(h, g, a, b, lambda_cal)
    }
}
