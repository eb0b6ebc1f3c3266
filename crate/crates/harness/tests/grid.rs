use std::collections::BTreeSet;
use std::path::Path;

use taskmerge_core::merge::MergeMethod;
use taskmerge_harness::config::{ScenarioConfig, ScenarioKind};
use taskmerge_harness::report::{read_results, report_emit, results_json, table_csv, table_rows};
use taskmerge_harness::scenario::{run_scenario, Arm, CellStatus, GridResult};

/// A grid small enough to run in seconds.
fn small(extra: &[&str]) -> ScenarioConfig {
    let mut sets: Vec<String> = [
        "seeds=[0,1]",
        "num_tasks=3",
        r#"scenarios=["original","norm_mismatch","low_confidence","combined"]"#,
        "dataset.train_samples=200",
        "dataset.test_samples=120",
        "dataset.unlabeled_samples=128",
        "dataset.pretrain_samples=200",
        "pretrain.steps=200",
        "pretrain.warmup_steps=20",
        "finetune.steps=120",
        "finetune.warmup_steps=10",
        "mtl.steps=100",
        "mtl.warmup_steps=10",
        "distac.steps=40",
    ]
    .map(String::from)
    .to_vec();
    sets.extend(extra.iter().map(|s| s.to_string()));
    ScenarioConfig::from_toml_str("", &sets).unwrap()
}

fn run_in_pool(cfg: &ScenarioConfig, threads: usize) -> GridResult {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(|| run_scenario(cfg).unwrap())
}

fn expected_skip(scenario: ScenarioKind, arm: Arm) -> bool {
    match arm {
        Arm::Raw => false,
        Arm::ScaledOnly => !scenario.has_norm_mismatch(),
        Arm::Distac => scenario == ScenarioKind::Original,
    }
}

#[test]
fn grid_is_exhaustive_counted_and_reproducible() {
    let cfg = small(&[]);
    let grid = run_in_pool(&cfg, 1);
    let t = cfg.num_tasks;

    // Every (seed, scenario, arm, method) exactly once.
    let keys: BTreeSet<_> = grid
        .cells
        .iter()
        .map(|c| (c.seed, c.scenario, c.arm, c.method))
        .collect();
    assert_eq!(keys.len(), grid.cells.len());
    assert_eq!(
        grid.cells.len(),
        2 * 4 * Arm::ALL.len() * MergeMethod::ALL.len()
    );
    assert!(grid.seed_errors.is_empty());

    for c in &grid.cells {
        match &c.status {
            CellStatus::Skipped { reason } => {
                assert!(
                    expected_skip(c.scenario, c.arm),
                    "{:?}",
                    (c.scenario, c.arm)
                );
                assert!(!reason.is_empty());
                assert!(c.test_reads.is_empty() && c.runs.is_empty());
            }
            CellStatus::Pass => {
                assert!(!expected_skip(c.scenario, c.arm));
                let runs = if c.scenario.has_norm_mismatch() { t } else { 1 };
                assert_eq!(c.runs.len(), runs);
                // One test read per task per merged model, none for λ tuning.
                assert_eq!(c.test_reads, vec![runs; t]);
                if c.scenario.has_norm_mismatch() {
                    let perturbed: Vec<usize> =
                        c.runs.iter().map(|r| r.perturbed_task.unwrap()).collect();
                    assert_eq!(perturbed, (0..t).collect::<Vec<_>>());
                } else {
                    assert!(c.runs.iter().all(|r| r.perturbed_task.is_none()));
                }
                assert!(c
                    .runs
                    .iter()
                    .all(|r| cfg.merge.lambda_grid.contains(&r.lambda)));
            }
            CellStatus::Fail { error } => {
                panic!("{:?} {:?} {:?}: {error}", c.scenario, c.arm, c.method)
            }
        }
    }

    // Uniform averaging has no coefficient to tune.
    for c in grid
        .cells
        .iter()
        .filter(|c| c.method == MergeMethod::Uniform && c.status == CellStatus::Pass)
    {
        assert!(c.runs.iter().all(|r| r.lambda == 1.0));
    }

    // Same inputs, different thread count: byte-identical report files.
    let again = run_in_pool(&cfg, 3);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let files_a = report_emit(&grid, a.path()).unwrap();
    let files_b = report_emit(&again, b.path()).unwrap();
    assert_eq!(files_a.len(), files_b.len());
    for (fa, fb) in files_a.iter().zip(&files_b) {
        assert_eq!(
            fa.strip_prefix(a.path()).unwrap(),
            fb.strip_prefix(b.path()).unwrap()
        );
        assert!(
            std::fs::read(fa).unwrap() == std::fs::read(fb).unwrap(),
            "{} differs",
            fa.display()
        );
    }
    check_report_layout(a.path(), &grid);
    let reread = read_results(&a.path().join("results.json")).unwrap();
    assert!(results_json(&reread).unwrap() == results_json(&grid).unwrap());

    check_normalized_accuracy(&grid);
}

fn check_report_layout(dir: &Path, grid: &GridResult) {
    for f in [
        "results.json",
        "table1.csv",
        "sources.csv",
        "conditioning.csv",
        "scaling_sweep.csv",
    ] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let histories = std::fs::read_dir(dir.join("history")).unwrap().count();
    assert_eq!(histories, grid.conditioning.len());
    let passing = grid
        .cells
        .iter()
        .filter(|c| c.status == CellStatus::Pass)
        .count();
    assert_eq!(
        std::fs::read_dir(dir.join("reliability")).unwrap().count(),
        passing
    );
    let table = std::fs::read_to_string(dir.join("table1.csv")).unwrap();
    assert!(table.starts_with("scenario,arm,method,seeds,accuracy,normalized_accuracy,display\n"));
}

/// Rebuilds every normalized accuracy from the source records and the per-task test accuracies.
fn check_normalized_accuracy(grid: &GridResult) {
    let source_acc = |seed: u64, task: usize, high_lr: bool, lc: bool| {
        grid.sources
            .iter()
            .find(|s| {
                s.seed == seed && s.task == task && s.high_lr == high_lr && s.low_confidence == lc
            })
            .unwrap()
            .test_accuracy
    };
    for c in grid.cells.iter().filter(|c| c.status == CellStatus::Pass) {
        let t = c.runs[0].eval.per_task.len();
        let mut per_task = vec![0.0; t];
        for r in &c.runs {
            for (k, e) in r.eval.per_task.iter().enumerate() {
                let denom = source_acc(
                    c.seed,
                    k,
                    r.perturbed_task == Some(k),
                    c.scenario.has_low_confidence(),
                );
                assert!((e.normalized_accuracy - e.accuracy / denom).abs() < 1e-12);
                per_task[k] += e.accuracy / denom / c.runs.len() as f64;
            }
        }
        let na = per_task.iter().sum::<f64>() / t as f64;
        assert!((c.summary.as_ref().unwrap().mean_normalized_accuracy - na).abs() < 1e-12);
    }
    for row in table_rows(grid) {
        let cells: Vec<_> = grid
            .cells
            .iter()
            .filter(|c| {
                c.scenario.name() == row.scenario
                    && c.arm.name() == row.arm
                    && c.method.name() == row.method
            })
            .collect();
        let mean = cells
            .iter()
            .map(|c| c.summary.as_ref().unwrap().mean_normalized_accuracy)
            .sum::<f64>()
            / cells.len() as f64;
        assert_eq!(row.seeds, cells.len());
        assert!((row.normalized_accuracy - mean).abs() < 1e-12);
    }
}

#[test]
fn disabled_distillation_leaves_rows_out() {
    let cfg = small(&[
        "seeds=[3]",
        "distac.enabled=false",
        "scaled_only_arm=false",
        "mtl_reference=false",
    ]);
    let grid = run_scenario(&cfg).unwrap();
    assert_eq!(
        grid.cells.len(),
        4 * Arm::ALL.len() * MergeMethod::ALL.len()
    );
    assert!(grid.conditioning.is_empty());
    for c in grid.cells.iter().filter(|c| c.arm != Arm::Raw) {
        assert!(matches!(&c.status, CellStatus::Skipped { reason } if reason.contains("disabled")));
    }
    let table = table_csv(&grid);
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "scenario,arm,method,seeds,accuracy,normalized_accuracy,display"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4 * MergeMethod::ALL.len());
    assert!(rows
        .iter()
        .all(|r| r.split(',').nth(1) == Some("raw") && r.split(',').count() == 7));
}

#[test]
fn failures_stay_inside_their_cells() {
    // A divergent distillation step size breaks every conditioned arm and nothing else.
    let cfg = small(&[
        "seeds=[0]",
        r#"scenarios=["original","low_confidence"]"#,
        "distac.learning_rate=1e12",
    ]);
    let grid = run_scenario(&cfg).unwrap();
    for c in &grid.cells {
        match (c.arm, &c.status) {
            (Arm::Distac, CellStatus::Fail { error }) => {
                assert!(error.contains("distillation"), "{error}")
            }
            (Arm::Raw, status) => assert_eq!(*status, CellStatus::Pass),
            (_, CellStatus::Skipped { .. }) => {}
            other => panic!("{other:?}"),
        }
    }
    assert!(grid.conditioning.iter().all(|c| c.error.is_some()));

    // A seed whose data cannot be generated fails all of its cells.
    let cfg = small(&[
        "seeds=[0]",
        "dataset.min_separation=80.0",
        "dataset.max_retries=2",
    ]);
    let grid = run_scenario(&cfg).unwrap();
    assert_eq!(grid.seed_errors.len(), 1);
    assert!(grid
        .cells
        .iter()
        .all(|c| matches!(c.status, CellStatus::Fail { .. })));
    assert!(report_emit(&grid, tempfile::tempdir().unwrap().path()).is_ok());
    assert!(table_rows(&grid).is_empty());
}

#[test]
fn empty_results_are_not_reported() {
    let mut grid = run_scenario(&small(&[
        "seeds=[0]",
        r#"scenarios=["original"]"#,
        "mtl_reference=false",
    ]))
    .unwrap();
    grid.cells.clear();
    assert!(report_emit(&grid, tempfile::tempdir().unwrap().path()).is_err());
}
