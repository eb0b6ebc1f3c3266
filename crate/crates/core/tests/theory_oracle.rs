use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taskmerge_core::linalg::{inverse_spd, norm, DenseMatrix};
use taskmerge_core::theory::*;

/// Minimises `c·θ + ½θᵀMθ` by gradient descent with step `1/L`.
fn iterative_minimiser(m: &DenseMatrix, c: &[f64]) -> Vec<f64> {
    let lmax = taskmerge_core::linalg::spectral_norm(m).unwrap();
    let step = 1.0 / lmax;
    let mut theta = vec![0.0; c.len()];
    for _ in 0..200_000 {
        let grad: Vec<f64> = m
            .matvec(&theta)
            .unwrap()
            .iter()
            .zip(c)
            .map(|(a, b)| a + b)
            .collect();
        if norm(&grad) < 1e-14 {
            break;
        }
        theta
            .iter_mut()
            .zip(&grad)
            .for_each(|(t, g)| *t -= step * g);
    }
    theta
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn newton_vector_matches_iterative_minimiser() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for dim in 2..=16 {
        let q = QuadGenerator {
            dim,
            ..QuadGenerator::default()
        }
        .sample(0.1, &mut rng)
        .unwrap();
        let tau = newton_task_vector(&q).unwrap();
        assert!(
            max_diff(&tau, &iterative_minimiser(q.h(), q.g())) < 1e-10,
            "dim {dim}"
        );
        let residual: Vec<f64> = q
            .h()
            .matvec(&tau)
            .unwrap()
            .iter()
            .zip(q.g())
            .map(|(a, b)| a + b)
            .collect();
        assert!(norm(&residual) < 1e-10);

        let cal = calibrated_task_vector_exact(&q).unwrap();
        let c: Vec<f64> = q
            .g()
            .iter()
            .zip(q.b())
            .map(|(g, b)| g + q.lambda_cal() * b)
            .collect();
        assert!(
            max_diff(&cal, &iterative_minimiser(&q.calibrated_hessian(), &c)) < 1e-10,
            "dim {dim}"
        );
    }
}

fn firstorder_error(q: &QuadTask, lambda: f64) -> f64 {
    let q = q.with_lambda(lambda).unwrap();
    let exact = calibrated_task_vector_exact(&q).unwrap();
    let approx = calibrated_task_vector_firstorder(&q, true).unwrap();
    norm(
        &exact
            .iter()
            .zip(&approx)
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>(),
    )
}

#[test]
fn firstorder_error_is_quadratic_in_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for dim in [2, 5, 8] {
        let q = QuadGenerator {
            dim,
            ..QuadGenerator::default()
        }
        .sample(0.0, &mut rng)
        .unwrap();
        let errs: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&l| firstorder_error(&q, l))
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 4.0).abs() <= 1.0, "dim {dim}: ratio {ratio}");
        }
        assert!(firstorder_error(&q, 0.1) / firstorder_error(&q, 0.05) > 3.0);
    }
}

#[test]
fn simplified_firstorder_is_exact_without_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = QuadGenerator {
        g_scale: 0.0,
        ..QuadGenerator::default()
    }
    .sample(0.1, &mut rng)
    .unwrap();
    assert_eq!(
        calibrated_task_vector_firstorder(&q, true).unwrap(),
        calibrated_task_vector_firstorder(&q, false).unwrap()
    );
}

#[test]
fn neumann_error_is_quadratic_in_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = QuadGenerator {
        dim: 6,
        ..QuadGenerator::default()
    }
    .sample(0.0, &mut rng)
    .unwrap();
    let err = |l: f64| {
        let exact = inverse_spd(&q.h().add(&q.a().scale(l)).unwrap()).unwrap();
        neumann_inverse(q.h(), q.a(), l, 1)
            .unwrap()
            .sub(&exact)
            .unwrap()
            .frobenius_norm()
    };
    let errs: Vec<f64> = [0.2, 0.1, 0.05].iter().map(|&l| err(l)).collect();
    for w in errs.windows(2) {
        assert!((w[0] / w[1] - 4.0).abs() <= 1.0);
    }
    // Higher orders shrink the error further.
    let exact = inverse_spd(&q.h().add(&q.a().scale(0.1)).unwrap()).unwrap();
    let e3 = neumann_inverse(q.h(), q.a(), 0.1, 3)
        .unwrap()
        .sub(&exact)
        .unwrap()
        .frobenius_norm();
    assert!(e3 < errs[1] * 0.1);
}

#[test]
fn calibration_shift_is_the_small_lambda_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = QuadGenerator::default().sample(1e-4, &mut rng).unwrap();
    let shift: Vec<f64> = calibrated_task_vector_exact(&q)
        .unwrap()
        .iter()
        .zip(newton_task_vector(&q).unwrap())
        .map(|(a, b)| a - b)
        .collect();
    let predicted: Vec<f64> = calibrated_task_vector_firstorder(&q, true)
        .unwrap()
        .iter()
        .zip(newton_task_vector(&q).unwrap())
        .map(|(a, b)| a - b)
        .collect();
    let rel = max_diff(&shift, &predicted) / norm(&predicted);
    assert!(rel < 1e-3, "relative deviation {rel}");
}

/// The fixed witness instance: seed 0, dimension 4, A = 0, α = β_m = 0.01.
fn witness() -> (QuadTask, QuadTask, MergeCoeffs) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gen = QuadGenerator {
        dim: 4,
        a_eigs: None,
        ..QuadGenerator::default()
    };
    let q1 = gen.sample(1e-3, &mut rng).unwrap();
    let q2 = gen.sample(1e-3, &mut rng).unwrap();
    (q1, q2, MergeCoeffs::new(0.01, 0.01).unwrap())
}

#[test]
fn merged_loss_delta_witness() {
    let (q1, q2, c) = witness();
    for task in [1, 2] {
        let (exact, first) = merged_loss_delta(&q1, &q2, c, task).unwrap();
        assert!(exact > 0.0, "task {task}: exact {exact:e}");
        assert!(
            ((exact - first) / exact).abs() < 0.10,
            "task {task}: exact {exact:e} first-order {first:e}"
        );
    }
}

#[test]
fn merge_point_linearisation_error_is_quadratic_in_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gen = QuadGenerator {
        dim: 5,
        ..QuadGenerator::default()
    };
    let (q1, q2) = (
        gen.sample(0.0, &mut rng).unwrap(),
        gen.sample(0.0, &mut rng).unwrap(),
    );
    let c = MergeCoeffs::new(0.7, 0.4).unwrap();
    let err = |l: f64| {
        let (a, b) = (q1.with_lambda(l).unwrap(), q2.with_lambda(l).unwrap());
        let exact = merged_loss_delta(&a, &b, c, 1).unwrap().0;
        (exact - merged_loss_delta_at_merge(&a, &b, c, 1).unwrap()).abs()
    };
    let errs: Vec<f64> = [0.2, 0.1, 0.05].iter().map(|&l| err(l)).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((ratio - 4.0).abs() <= 1.0, "ratio {ratio}");
    }
}

#[test]
fn origin_linearisation_keeps_a_cross_term() {
    // The prediction taken at θ₀ misses ∇²J·θ_merge^CE, an α·λ·‖τ‖ term, so its
    // error only halves with λ.
    let (q1, q2, _) = witness();
    let c = MergeCoeffs::new(0.5, 0.5).unwrap();
    let rows = theory_sweep(&q1, &q2, c, 1, &[0.02, 0.01, 0.005]).unwrap();
    for w in rows.windows(2) {
        let ratio = w[0].error / w[1].error;
        assert!((ratio - 2.0).abs() < 0.25, "ratio {ratio}");
    }
}
