mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taskmerge_core::data::Head;
use taskmerge_core::metrics::{accuracy, predictive_entropy};
use taskmerge_core::model::{init_params, Activation, ModelSpec};
use taskmerge_core::optim::{lr_at, Schedule};
use taskmerge_core::train::{finetune, pretrain, train_mtl, LossSpec, TrainConfig};

fn spec(classes: usize) -> ModelSpec {
    ModelSpec {
        input_dim: 6,
        hidden_dims: vec![16, 16],
        num_classes: classes,
        activation: Activation::Tanh,
    }
}

#[test]
fn zero_steps_is_identity() {
    let s = spec(2);
    let theta = init_params(&s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let data = common::blobs(0, 32, 6, Head::full(2), 3.0);
    let run = finetune(
        &s,
        &theta,
        &data,
        &TrainConfig {
            steps: 0,
            warmup_steps: 0,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(run.theta, theta);
    assert!(run.history.is_empty());
}

#[test]
fn separable_two_class_data_is_fit() {
    let s = spec(2);
    let theta = init_params(&s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let data = common::blobs(0, 200, 6, Head::full(2), 4.0);
    let run = finetune(
        &s,
        &theta,
        &data,
        &TrainConfig {
            learning_rate: 1e-2,
            steps: 200,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    assert!(accuracy(&s, &run.theta, &data).unwrap() >= 0.99);
    assert_eq!(run.history.len(), 200);
    assert!(run.history.last().unwrap().loss < run.history[0].loss);
}

#[test]
fn larger_learning_rate_moves_further() {
    let s = spec(4);
    for seed in 0..3 {
        let theta = init_params(&s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let data = common::blobs(seed, 256, 6, Head::full(4), 3.0);
        let cfg = TrainConfig {
            learning_rate: 1e-4,
            seed,
            ..TrainConfig::default()
        };
        let low = finetune(&s, &theta, &data, &cfg)
            .unwrap()
            .theta
            .sub(&theta)
            .unwrap()
            .norm();
        let cfg_hi = TrainConfig {
            learning_rate: 1e-3,
            ..cfg
        };
        let high = finetune(&s, &theta, &data, &cfg_hi)
            .unwrap()
            .theta
            .sub(&theta)
            .unwrap()
            .norm();
        assert!(high >= 2.0 * low, "seed {seed}: {high} vs {low}");
    }
}

#[test]
fn training_is_bit_reproducible() {
    let s = spec(4);
    let theta = init_params(&s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let data = common::blobs(2, 100, 6, Head::full(4), 3.0);
    for loss in [
        LossSpec::CrossEntropy,
        LossSpec::Mixup,
        LossSpec::focal(),
        LossSpec::label_smoothing(),
    ] {
        let cfg = TrainConfig {
            steps: 40,
            warmup_steps: 4,
            loss,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = finetune(&s, &theta, &data, &cfg).unwrap();
        let b = finetune(&s, &theta, &data, &cfg).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.history, b.history);
    }
}

#[test]
fn mtl_degenerates_to_finetune_for_one_task() {
    let s = spec(4);
    let theta = init_params(&s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let data = common::blobs(2, 100, 6, Head::full(4), 3.0);
    let cfg = TrainConfig {
        steps: 30,
        warmup_steps: 3,
        ..TrainConfig::default()
    };
    assert_eq!(
        train_mtl(&s, &theta, &[&data], &cfg).unwrap().theta,
        finetune(&s, &theta, &data, &cfg).unwrap().theta
    );
}

#[test]
fn mtl_beats_zero_shot_on_disjoint_class_tasks() {
    let s = spec(4);
    let a = common::blobs(3, 160, 6, Head::new(0, 2), 3.0);
    let b = common::blobs(4, 160, 6, Head::new(2, 2), 3.0);
    let pre = pretrain(
        &s,
        &[&a, &b],
        &TrainConfig {
            steps: 20,
            warmup_steps: 2,
            ..TrainConfig::default()
        },
    )
    .unwrap()
    .theta;
    let joint = train_mtl(
        &s,
        &pre,
        &[&a, &b],
        &TrainConfig {
            learning_rate: 5e-3,
            steps: 300,
            ..TrainConfig::default()
        },
    )
    .unwrap()
    .theta;
    for task in [&a, &b] {
        assert!(accuracy(&s, &joint, task).unwrap() >= accuracy(&s, &pre, task).unwrap());
        assert!(accuracy(&s, &joint, task).unwrap() > 0.9);
    }
}

#[test]
fn label_smoothing_raises_entropy() {
    let s = spec(4);
    for seed in 0..3 {
        let theta = init_params(&s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let train = common::blobs(seed, 256, 6, Head::full(4), 3.0);
        let test = common::blobs(seed + 100, 128, 6, Head::full(4), 3.0);
        let base = TrainConfig {
            learning_rate: 5e-3,
            seed,
            ..TrainConfig::default()
        };
        let hard = finetune(&s, &theta, &train, &base).unwrap().theta;
        let smooth = finetune(
            &s,
            &theta,
            &train,
            &TrainConfig {
                loss: LossSpec::label_smoothing(),
                ..base
            },
        )
        .unwrap()
        .theta;
        assert!(
            predictive_entropy(&s, &smooth, &test).unwrap()
                > predictive_entropy(&s, &hard, &test).unwrap()
        );
    }
}

#[test]
fn frozen_head_stays_fixed() {
    let s = spec(4);
    let theta = init_params(&s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let data = common::blobs(2, 64, 6, Head::full(4), 3.0);
    let out = finetune(
        &s,
        &theta,
        &data,
        &TrainConfig {
            steps: 20,
            warmup_steps: 0,
            freeze_head: true,
            ..TrainConfig::default()
        },
    )
    .unwrap()
    .theta;
    let blocks = theta.shapes().entries().len();
    for b in 0..blocks {
        assert_eq!(out.block(b) == theta.block(b), b >= blocks - 2);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let s = spec(2);
    let theta = init_params(&s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let data = common::blobs(0, 16, 6, Head::full(2), 3.0);
    for cfg in [
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            warmup_steps: 600,
            ..TrainConfig::default()
        },
        TrainConfig {
            loss: LossSpec::LabelSmoothing { alpha: 1.5 },
            ..TrainConfig::default()
        },
    ] {
        assert!(finetune(&s, &theta, &data, &cfg).is_err());
    }
    let huge = TrainConfig {
        learning_rate: 1e308,
        steps: 50,
        warmup_steps: 0,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    match finetune(&s, &theta, &data, &huge) {
        Err(taskmerge_core::Error::NonFinite { .. }) => {}
        other => panic!(
            "expected a non-finite abort, got {:?}",
            other.map(|r| r.theta.norm())
        ),
    }
}

#[test]
fn cosine_schedule_never_increases_after_warmup() {
    let lrs: Vec<f64> = (0..500)
        .map(|s| lr_at(Schedule::Cosine, 1e-3, s, 50, 500))
        .collect();
    assert!(lrs[50..].windows(2).all(|w| w[1] <= w[0]));
}
