//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

/// Learning rate at `step` (0-based): linear warmup to `base`, then either
/// constant or a half-cosine decay to zero at `total`.
pub fn lr_at(schedule: Schedule, base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let span = total.saturating_sub(warmup).max(1) as f64;
            let progress = ((step - warmup) as f64 / span).min(1.0);
            0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamW {
    pub fn new(dim: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// One update in place. Coordinates with `frozen[i] == true` are left untouched.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, frozen: Option<&[bool]>) {
        assert_eq!(theta.len(), self.m.len(), "optimizer state size mismatch");
        assert_eq!(grad.len(), self.m.len(), "gradient size mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] *= 1.0 - lr * self.weight_decay;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_is_nonincreasing_after_warmup() {
        let lrs: Vec<f64> = (0..100)
            .map(|s| lr_at(Schedule::Cosine, 1e-3, s, 10, 100))
            .collect();
        assert!((lrs[9] - 1e-3).abs() < 1e-18);
        assert!(lrs[..10].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[10..].windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs[99] > 0.0);
        assert_eq!(lr_at(Schedule::Constant, 0.5, 50, 0, 10), 0.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first step is lr·sign(g) (up to eps).
        let mut opt = AdamW::new(2, 0.0);
        let mut theta = vec![1.0, -1.0];
        opt.step(&mut theta, &[0.3, -7.0], 0.01, None);
        assert!((theta[0] - 0.99).abs() < 1e-9);
        assert!((theta[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut opt = AdamW::new(1, 0.1);
        let mut theta = vec![2.0];
        opt.step(&mut theta, &[0.0], 0.5, None);
        assert!((theta[0] - 2.0 * 0.95).abs() < 1e-12);
        let mut frozen_theta = vec![2.0];
        opt.step(&mut frozen_theta, &[1.0], 0.5, Some(&[true]));
        assert_eq!(frozen_theta[0], 2.0);
    }
}
