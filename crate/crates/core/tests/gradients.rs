mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskmerge_core::data::{Batch, Head, Targets};
use taskmerge_core::loss::Objective;
use taskmerge_core::model::{
    batch_loss, forward_logits, grad_loss, init_params, Activation, ModelSpec, ParamVector,
};

const H: f64 = 1e-5;

fn fd_gradient(spec: &ModelSpec, theta: &ParamVector, batch: &Batch, obj: &Objective) -> Vec<f64> {
    (0..theta.len())
        .map(|i| {
            let mut plus = theta.clone();
            plus.values_mut()[i] += H;
            let mut minus = theta.clone();
            minus.values_mut()[i] -= H;
            (batch_loss(spec, &plus, batch, obj).unwrap()
                - batch_loss(spec, &minus, batch, obj).unwrap())
                / (2.0 * H)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

/// One seeded (θ, batch, objective) triple; cycles through every objective.
fn case(seed: u64) -> (ModelSpec, ParamVector, Batch, Objective) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let activation = if seed.is_multiple_of(2) {
        Activation::Tanh
    } else {
        Activation::Relu
    };
    let spec = ModelSpec {
        input_dim: 5,
        hidden_dims: vec![6, 4],
        num_classes: 6,
        activation,
    };
    let theta = init_params(&spec, &mut rng).unwrap();
    let head = if seed.is_multiple_of(3) {
        Head::full(6)
    } else {
        Head::new(2, 3)
    };
    let n = rng.random_range(1..5);
    let inputs = common::uniform_vec(&mut rng, n * 5, 1.5);
    let c = head.len;
    let (targets, obj) = match seed % 5 {
        0 => (
            Targets::Hard((0..n).map(|_| rng.random_range(0..c)).collect()),
            Objective::CrossEntropy { smoothing: 0.0 },
        ),
        1 => (
            Targets::Hard((0..n).map(|_| rng.random_range(0..c)).collect()),
            Objective::CrossEntropy { smoothing: 0.1 },
        ),
        2 => (
            Targets::Hard((0..n).map(|_| rng.random_range(0..c)).collect()),
            Objective::Focal {
                gamma: [0.5, 2.0, 10.0][(seed / 5 % 3) as usize],
            },
        ),
        3 => {
            let t = [(1.0, 10.0), (10.0, 10.0), (2.0, 0.5)][(seed / 5 % 3) as usize];
            (
                Targets::Teacher(
                    (0..n)
                        .map(|_| common::uniform_vec(&mut rng, c, 3.0))
                        .collect(),
                ),
                Objective::Distill {
                    t_teacher: t.0,
                    t_student: t.1,
                },
            )
        }
        _ => {
            let soft = (0..n)
                .map(|_| {
                    let lam: f64 = rng.random_range(0.0..1.0);
                    let mut q = vec![0.0; c];
                    q[rng.random_range(0..c)] += lam;
                    q[rng.random_range(0..c)] += 1.0 - lam;
                    q
                })
                .collect();
            (Targets::Soft(soft), Objective::SoftCrossEntropy)
        }
    };
    (
        spec,
        theta,
        Batch {
            dim: 5,
            inputs,
            targets,
            head,
        },
        obj,
    )
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let (spec, theta, batch, obj) = case(seed);
        let (_, g) = grad_loss(&spec, &theta, &batch, &obj).unwrap();
        let err = rel_err(g.values(), &fd_gradient(&spec, &theta, &batch, &obj));
        assert!(
            err < 1e-4,
            "case {seed} ({obj:?}): relative error {err:.3e}"
        );
        worst = worst.max(err);
    }
    assert!(worst < 1e-4);
}

#[test]
fn gradient_vanishes_at_stationary_point() {
    // One input, one hidden tanh unit, two classes, targets matching the model's own softmax.
    let spec = ModelSpec {
        input_dim: 1,
        hidden_dims: vec![1],
        num_classes: 2,
        activation: Activation::Tanh,
    };
    let theta = ParamVector::new(spec.shape_map(), vec![0.7, 0.1, 1.3, -0.4, 0.2, -0.3]).unwrap();
    let x = [0.5, -1.2, 2.0];
    let soft: Vec<Vec<f64>> = x
        .iter()
        .map(|&xi| {
            taskmerge_core::loss::probabilities(&forward_logits(&spec, &theta, &[xi]).unwrap())
        })
        .collect();
    let batch = Batch {
        dim: 1,
        inputs: x.to_vec(),
        targets: Targets::Soft(soft),
        head: Head::full(2),
    };
    let (_, g) = grad_loss(&spec, &theta, &batch, &Objective::SoftCrossEntropy).unwrap();
    assert!(g.norm() < 1e-8, "gradient norm {}", g.norm());
}

#[test]
fn self_distillation_at_equal_temperature_has_zero_gradient() {
    let spec = ModelSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let theta = init_params(&spec, &mut rng).unwrap();
    let inputs = common::uniform_vec(&mut rng, 8 * 16, 1.0);
    let teacher: Vec<Vec<f64>> = inputs
        .chunks(16)
        .map(|x| forward_logits(&spec, &theta, x).unwrap())
        .collect();
    let batch = Batch {
        dim: 16,
        inputs,
        targets: Targets::Teacher(teacher),
        head: Head::full(4),
    };
    for t in [1.0, 4.0, 10.0] {
        let (loss, g) = grad_loss(
            &spec,
            &theta,
            &batch,
            &Objective::Distill {
                t_teacher: t,
                t_student: t,
            },
        )
        .unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(g.norm() < 1e-10);
    }
}

#[test]
fn forward_matches_layer_by_layer_evaluation() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ModelSpec {
            input_dim: 7,
            hidden_dims: vec![5, 9, 3],
            num_classes: 4,
            activation: Activation::Tanh,
        };
        let theta = init_params(&spec, &mut rng).unwrap();
        let x = common::uniform_vec(&mut rng, 7, 2.0);
        let layers = taskmerge_core::model::unflatten(&theta).unwrap();
        let mut a = x.clone();
        for (l, layer) in layers.iter().enumerate() {
            let mut z = layer.weight.matvec(&a).unwrap();
            z.iter_mut().zip(&layer.bias).for_each(|(zi, b)| *zi += b);
            a = if l + 1 == layers.len() {
                z
            } else {
                z.iter().map(|v| v.tanh()).collect()
            };
        }
        let got = forward_logits(&spec, &theta, &x).unwrap();
        for (g, e) in got.iter().zip(&a) {
            assert!((g - e).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_continuous_in_parameters() {
    let spec = ModelSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let theta = init_params(&spec, &mut rng).unwrap();
    let dir = theta
        .with_values(common::uniform_vec(&mut rng, theta.len(), 1.0))
        .unwrap();
    let x = common::uniform_vec(&mut rng, 16, 1.0);
    let base = forward_logits(&spec, &theta, &x).unwrap();
    let mut prev = f64::INFINITY;
    for h in [1e-1, 1e-2, 1e-3, 1e-4, 1e-5] {
        let moved = forward_logits(&spec, &theta.add_scaled(&dir, h).unwrap(), &x).unwrap();
        let gap = moved
            .iter()
            .zip(&base)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap < prev);
        prev = gap;
    }
    assert!(prev < 1e-3);
}
