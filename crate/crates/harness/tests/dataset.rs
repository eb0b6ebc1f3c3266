use taskmerge_core::data::LabeledSet;
use taskmerge_harness::dataset::*;
use taskmerge_harness::idx::{encode_images, encode_labels};

fn spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        seed,
        ..DatasetSpec::default()
    }
}

#[test]
fn same_seed_gives_identical_suites() {
    let a = gen_synthetic_tasks(&spec(7), 4).unwrap();
    let b = gen_synthetic_tasks(&spec(7), 4).unwrap();
    assert_eq!(a, b);
    let bits = |s: &TaskSuite| -> Vec<u64> {
        s.tasks
            .iter()
            .flat_map(|t| t.train.inputs().iter().chain(t.test.inputs()))
            .map(|v| v.to_bits())
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(a, gen_synthetic_tasks(&spec(8), 4).unwrap());
}

#[test]
fn class_means_are_four_sigma_apart() {
    for seed in 0..5 {
        for sigma in [0.5, 1.0] {
            let s = DatasetSpec {
                sigma,
                mean_spread: 2.0 * sigma,
                ..spec(seed)
            };
            let suite = gen_synthetic_tasks(&s, 4).unwrap();
            for means in &suite.class_means {
                for i in 0..means.len() {
                    for j in 0..i {
                        let d2: f64 = means[i]
                            .iter()
                            .zip(&means[j])
                            .map(|(a, b)| (a - b).powi(2))
                            .sum();
                        assert!(
                            d2.sqrt() >= 4.0 * sigma,
                            "seed {seed}: distance {} < 4σ",
                            d2.sqrt()
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn infeasible_separation_is_an_error() {
    let s = DatasetSpec {
        min_separation: 50.0,
        max_retries: 5,
        ..spec(0)
    };
    assert!(gen_synthetic_tasks(&s, 2).is_err());
}

#[test]
fn splits_and_heads_are_laid_out_per_task() {
    let s = spec(1);
    let suite = gen_synthetic_tasks(&s, 3).unwrap();
    assert_eq!(suite.num_classes, 3 * s.classes_per_task);
    for (t, task) in suite.tasks.iter().enumerate() {
        assert_eq!(task.id, task_id(t));
        let head = task.train.head();
        assert_eq!(
            (head.start, head.len),
            (t * s.classes_per_task, s.classes_per_task)
        );
        for h in [
            task.val.head(),
            task.test.head(),
            task.unlabeled.head(),
            suite.pretrain[t].head(),
        ] {
            assert_eq!(h, head);
        }
        assert_eq!(task.val.len(), 100);
        assert_eq!(task.train.len(), 400);
        assert_eq!(task.test.len(), s.test_samples);
        assert_eq!(task.unlabeled.len(), s.unlabeled_samples);
        assert_eq!(suite.pretrain[t].len(), s.pretrain_samples);
        // No sample is shared between the labeled splits.
        let train: std::collections::HashSet<Vec<u64>> = (0..task.train.len())
            .map(|i| task.train.input(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        for set in [&task.val, &task.test] {
            assert!((0..set.len())
                .all(|i| !train
                    .contains(&set.input(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>())));
        }
    }
}

/// Multinomial logistic regression by full-batch gradient descent.
fn probe_accuracy(train: &LabeledSet, test: &LabeledSet) -> f64 {
    let (d, c) = (train.dim(), train.head().len);
    let mut w = vec![0.0; c * (d + 1)];
    let scores = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|k| w[k * (d + 1) + d] + (0..d).map(|j| w[k * (d + 1) + j] * x[j]).sum::<f64>())
            .collect()
    };
    for _ in 0..300 {
        let mut g = vec![0.0; w.len()];
        for i in 0..train.len() {
            let x = train.input(i);
            let s = scores(&w, x);
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for k in 0..c {
                let r = (s[k] - m).exp() / z - if k == train.label(i) { 1.0 } else { 0.0 };
                for j in 0..d {
                    g[k * (d + 1) + j] += r * x[j];
                }
                g[k * (d + 1) + d] += r;
            }
        }
        let n = train.len() as f64;
        w.iter_mut()
            .zip(&g)
            .for_each(|(wi, gi)| *wi -= 0.1 * gi / n);
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let s = scores(&w, test.input(i));
            (0..c).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap() == test.label(i)
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn tasks_are_linearly_separable_at_seed_zero() {
    let suite = gen_synthetic_tasks(&spec(0), 4).unwrap();
    for task in &suite.tasks {
        let acc = probe_accuracy(&task.train, &task.test);
        assert!(acc >= 0.95, "{}: probe accuracy {acc}", task.id);
    }
}

fn idx_fixture(
    dir: &std::path::Path,
    n: usize,
    tag: &str,
) -> (std::path::PathBuf, std::path::PathBuf) {
    let labels: Vec<u8> = (0..n).map(|i| (i % 8) as u8).collect();
    let pixels: Vec<u8> = labels
        .iter()
        .flat_map(|&l| [l * 30, 255 - l * 30, (l * 7) % 255, 9])
        .collect();
    let (img, lab) = (
        dir.join(format!("{tag}-img")),
        dir.join(format!("{tag}-lab")),
    );
    std::fs::write(&img, encode_images(n, 2, 2, &pixels)).unwrap();
    std::fs::write(&lab, encode_labels(&labels)).unwrap();
    (img, lab)
}

#[test]
fn idx_tasks_slice_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (train_images, train_labels) = idx_fixture(dir.path(), 160, "train");
    let (test_images, test_labels) = idx_fixture(dir.path(), 40, "test");
    for (slicing, first) in [
        (TaskSlicing::Consecutive, [0u8, 1]),
        (TaskSlicing::Strided, [0u8, 4]),
    ] {
        let s = DatasetSpec {
            kind: DatasetKind::IdxFiles,
            classes_per_task: 2,
            train_samples: 30,
            pretrain_samples: 10,
            unlabeled_samples: 5,
            test_samples: 1000,
            idx: Some(IdxSource {
                train_images: train_images.clone(),
                train_labels: train_labels.clone(),
                test_images: test_images.clone(),
                test_labels: test_labels.clone(),
                slicing,
            }),
            ..DatasetSpec::default()
        };
        let suite = load_suite(&s, 4).unwrap();
        assert_eq!((suite.input_dim, suite.num_classes), (4, 8));
        let t0 = &suite.tasks[0];
        assert_eq!(t0.train.len() + t0.val.len(), 30);
        assert_eq!(t0.test.len(), 10);
        assert_eq!(t0.unlabeled.len(), 5);
        assert_eq!(suite.pretrain[0].len(), 10);
        // The fixture encodes the raw label in the first pixel.
        for i in 0..t0.test.len() {
            let raw = (t0.test.input(i)[0] * 255.0 / 30.0).round() as u8;
            assert_eq!(raw, first[t0.test.label(i)]);
        }
    }
}

#[test]
fn idx_suite_needs_enough_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = idx_fixture(dir.path(), 16, "x");
    let s = DatasetSpec {
        kind: DatasetKind::IdxFiles,
        classes_per_task: 3,
        idx: Some(IdxSource {
            train_images: img.clone(),
            train_labels: lab.clone(),
            test_images: img,
            test_labels: lab,
            slicing: TaskSlicing::Consecutive,
        }),
        ..DatasetSpec::default()
    };
    // Label 8 of the third task never occurs.
    assert!(load_suite(&s, 3).is_err());
}
