#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskmerge_core::data::{Head, LabeledSet};

/// Gaussian blobs: class `c` centred at `sep · e_c` (cycled over dimensions) plus unit noise.
pub fn blobs(seed: u64, n: usize, dim: usize, head: Head, sep: f64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % head.len;
        for d in 0..dim {
            let centre = if d == y % dim {
                sep * (1.0 + (y / dim) as f64)
            } else {
                0.0
            };
            let noise: f64 = rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0);
            inputs.push(centre + 0.5 * noise);
        }
        labels.push(y);
    }
    LabeledSet::new(dim, inputs, labels, head).unwrap()
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}
