//! The scenario grid: pretrain, fine-tune, condition, merge and evaluate.
//!
//! Work is spread over a rayon pool in three waves per seed (fine-tunes,
//! distillation jobs, merge cells). Each wave collects into a vector in input
//! order, so results never depend on scheduling.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use taskmerge_core::data::LabeledSet;
use taskmerge_core::distac::{choose_kappa_norm_match, distac_condition, KdConfig, KdRecord};
use taskmerge_core::loss::probabilities;
use taskmerge_core::merge::{
    compute_task_vector, merged_direction, tune_lambda_on, MergeConfig, MergeMethod, TaskVector,
};
use taskmerge_core::metrics::{
    accuracy_of_logits, argmax, default_kappa_grid, fit_temperature, mean_entropy_of_logits,
    nll_at_temperature, normalized_accuracy, reliability_from_predictions, scaling_sweep,
    window_logits, EvalResult, ReliabilityReport, TaskEval,
};
use taskmerge_core::model::{ModelSpec, ParamVector};
use taskmerge_core::train::{finetune, pretrain, train_mtl, LossSpec, TrainConfig};

use crate::config::{ScenarioConfig, ScenarioKind};
use crate::dataset::{load_suite, DatasetSpec, TaskSuite};
use crate::error::{Error, Result};
use crate::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Task vectors as fine-tuned.
    Raw,
    /// The norm-matching κ applied to the oversized vector, no distillation.
    ScaledOnly,
    /// Flagged task vectors replaced by their distilled counterparts.
    Distac,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Raw, Arm::ScaledOnly, Arm::Distac];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Raw => "raw",
            Arm::ScaledOnly => "scaled_only",
            Arm::Distac => "distac",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Pass,
    Fail { error: String },
    Skipped { reason: String },
}

/// One merge of one run inside a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEval {
    pub run: usize,
    /// Task fine-tuned at the multiplied learning rate, if any.
    pub perturbed_task: Option<usize>,
    pub lambda: f64,
    pub val_accuracy: f64,
    pub eval: EvalResult,
    pub val_nll: f64,
    pub temperature: f64,
    pub val_nll_scaled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub scenario: ScenarioKind,
    pub arm: Arm,
    pub method: MergeMethod,
    #[serde(flatten)]
    pub status: CellStatus,
    pub runs: Vec<RunEval>,
    /// Per-task metrics averaged over runs.
    pub summary: Option<EvalResult>,
    /// Test-set reads per task over the whole cell.
    pub test_reads: Vec<usize>,
    pub reliability: Option<ReliabilityReport>,
}

/// A fine-tuned source model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub seed: u64,
    pub task: usize,
    pub high_lr: bool,
    pub low_confidence: bool,
    pub learning_rate: f64,
    pub loss: LossSpec,
    #[serde(with = "crate::report::nan_as_null")]
    pub norm: f64,
    #[serde(with = "crate::report::nan_as_null")]
    pub test_accuracy: f64,
    #[serde(with = "crate::report::nan_as_null")]
    pub test_entropy: f64,
    #[serde(with = "crate::report::nan_as_null")]
    pub val_accuracy: f64,
    #[serde(with = "crate::report::nan_as_null")]
    pub ece: f64,
    pub error: Option<String>,
}

/// One distillation job and what it did to its task vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub seed: u64,
    pub task: usize,
    pub high_lr: bool,
    pub low_confidence: bool,
    pub kappa: f64,
    pub t_teacher: f64,
    pub t_student: f64,
    #[serde(with = "crate::report::nan_as_null")]
    pub tau_norm: f64,
    #[serde(with = "crate::report::nan_as_null")]
    pub conditioned_norm: f64,
    /// `‖θ − θ_pre‖ / (κ‖τ‖)`.
    #[serde(with = "crate::report::nan_as_null")]
    pub norm_ratio: f64,
    #[serde(with = "crate::report::nan_as_null")]
    pub teacher_accuracy: f64,
    #[serde(with = "crate::report::nan_as_null")]
    pub student_accuracy: f64,
    #[serde(with = "crate::report::nan_as_null")]
    pub teacher_entropy: f64,
    #[serde(with = "crate::report::nan_as_null")]
    pub student_entropy: f64,
    pub error: Option<String>,
    pub history: Vec<KdRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub seed: u64,
    pub task: usize,
    /// `(κ, test accuracy of θ_pre + κτ)`.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtlRecord {
    pub seed: u64,
    pub eval: Option<EvalResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub config: ScenarioConfig,
    pub cells: Vec<CellResult>,
    pub sources: Vec<SourceRecord>,
    pub conditioning: Vec<ConditionRecord>,
    pub sweeps: Vec<SweepRecord>,
    pub mtl: Vec<MtlRecord>,
    /// Per-seed failures that prevented any cell from running.
    pub seed_errors: Vec<(u64, String)>,
}

impl GridResult {
    pub fn cell(
        &self,
        seed: u64,
        scenario: ScenarioKind,
        arm: Arm,
        method: MergeMethod,
    ) -> Option<&CellResult> {
        self.cells.iter().find(|c| {
            c.seed == seed && c.scenario == scenario && c.arm == arm && c.method == method
        })
    }

    /// Mean over seeds of a passing cell's mean normalized accuracy. `None` if any seed lacks it.
    pub fn seed_mean_na(
        &self,
        scenario: ScenarioKind,
        arm: Arm,
        method: MergeMethod,
    ) -> Option<f64> {
        self.seed_mean(scenario, arm, method, |e| e.mean_normalized_accuracy)
    }

    pub fn seed_mean(
        &self,
        scenario: ScenarioKind,
        arm: Arm,
        method: MergeMethod,
        f: impl Fn(&EvalResult) -> f64,
    ) -> Option<f64> {
        let seeds = &self.config.seeds;
        let mut total = 0.0;
        for &s in seeds {
            let c = self.cell(s, scenario, arm, method)?;
            total += f(c.summary.as_ref()?);
        }
        Some(total / seeds.len() as f64)
    }
}

/// Rejects merge knobs the core would only reject later, mid-grid.
pub fn check_merge_config(cfg: &MergeConfig) -> Result<()> {
    let bad = |m: &str| Err(Error::Config(format!("merge: {m}")));
    if cfg.lambda_grid.is_empty()
        || cfg
            .lambda_grid
            .iter()
            .any(|l| !(*l >= 0.0 && l.is_finite()))
    {
        return bad("lambda_grid must be nonempty with finite nonnegative entries");
    }
    if !(cfg.ties_keep_fraction > 0.0 && cfg.ties_keep_fraction <= 1.0) {
        return bad("ties_keep_fraction must lie in (0, 1]");
    }
    if cfg.consensus_k == 0 {
        return bad("consensus_k must be at least 1");
    }
    if !(cfg.tall_weight >= 0.0) {
        return bad("tall_weight must be nonnegative");
    }
    Ok(())
}

/// A fine-tuning recipe for one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct FtKey {
    task: usize,
    high_lr: bool,
    low_confidence: bool,
}

/// The task vectors merged together in one run of a scenario.
#[derive(Debug, Clone)]
struct RunPlan {
    run: usize,
    sources: Vec<FtKey>,
    perturbed: Option<usize>,
}

fn runs_for(kind: ScenarioKind, num_tasks: usize) -> Vec<RunPlan> {
    let lc = kind.has_low_confidence();
    let plan = |run, high: Option<usize>| RunPlan {
        run,
        sources: (0..num_tasks)
            .map(|t| FtKey {
                task: t,
                high_lr: high == Some(t),
                low_confidence: lc,
            })
            .collect(),
        perturbed: high,
    };
    if kind.has_norm_mismatch() {
        (0..num_tasks).map(|r| plan(r, Some(r))).collect()
    } else {
        vec![plan(0, None)]
    }
}

/// A distillation job: which source, which profile.
#[derive(Debug, Clone, Copy, PartialEq)]
struct KdJob {
    key: FtKey,
    kappa: f64,
    temps: (f64, f64),
    /// The oversized vector picked by the κ rule.
    norm_match: bool,
}

impl KdJob {
    fn same(&self, other: &KdJob) -> bool {
        self.key == other.key
            && self.norm_match == other.norm_match
            && self.kappa.to_bits() == other.kappa.to_bits()
            && self.temps == other.temps
    }
}

struct Source {
    theta: ParamVector,
    tau: TaskVector,
    test_accuracy: f64,
}

/// Test splits behind read counters.
struct GuardedTest<'a> {
    sets: Vec<&'a LabeledSet>,
    reads: Vec<AtomicUsize>,
}

impl<'a> GuardedTest<'a> {
    fn new(suite: &'a TaskSuite) -> Self {
        Self {
            sets: suite.tasks.iter().map(|t| &t.test).collect(),
            reads: suite.tasks.iter().map(|_| AtomicUsize::new(0)).collect(),
        }
    }

    fn read(&self, task: usize) -> &'a LabeledSet {
        self.reads[task].fetch_add(1, Ordering::Relaxed);
        self.sets[task]
    }

    fn counts(&self) -> Vec<usize> {
        self.reads
            .iter()
            .map(|r| r.load(Ordering::Relaxed))
            .collect()
    }
}

fn err_string(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Dataset spec for one seed of the grid.
pub fn seed_dataset(cfg: &ScenarioConfig, seed: u64) -> DatasetSpec {
    DatasetSpec {
        seed: mix_seed(cfg.dataset.seed, seed),
        ..cfg.dataset.clone()
    }
}

pub fn pretrain_config(cfg: &ScenarioConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: mix_seed(seed, 0x9e7a),
        ..cfg.pretrain.clone()
    }
}

/// Fine-tuning recipe of `task` under the given perturbations.
pub fn finetune_config(
    cfg: &ScenarioConfig,
    seed: u64,
    task: usize,
    high_lr: bool,
    low_confidence: bool,
) -> TrainConfig {
    let mut tc = cfg.finetune.clone();
    tc.seed = mix_seed(seed, 0x1000 + task as u64);
    if high_lr {
        tc.learning_rate *= cfg.high_lr_factor;
    }
    if low_confidence {
        tc.loss = cfg.low_confidence_loss();
    }
    tc
}

fn distac_seed(seed: u64, job: &KdJob) -> u64 {
    mix_seed(
        mix_seed(seed, 0xd157 + job.key.task as u64),
        job.kappa.to_bits(),
    )
}

/// Seed-level state shared by every cell of that seed.
pub struct SeedContext {
    pub seed: u64,
    pub suite: TaskSuite,
    pub spec: ModelSpec,
    pub theta_pre: ParamVector,
}

pub fn prepare_seed(cfg: &ScenarioConfig, seed: u64) -> Result<SeedContext> {
    let suite = load_suite(&seed_dataset(cfg, seed), cfg.num_tasks)?;
    let spec = cfg.model_spec(suite.input_dim, suite.num_classes);
    let theta_pre = pretrain(&spec, &suite.pretrain_refs(), &pretrain_config(cfg, seed))?.theta;
    Ok(SeedContext {
        seed,
        suite,
        spec,
        theta_pre,
    })
}

struct SeedOutput {
    cells: Vec<CellResult>,
    sources: Vec<SourceRecord>,
    conditioning: Vec<ConditionRecord>,
    sweeps: Vec<SweepRecord>,
    mtl: Option<MtlRecord>,
}

/// Runs every configured scenario for every seed.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<GridResult> {
    cfg.validate()?;
    let outputs: Vec<(u64, std::result::Result<SeedOutput, String>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(cfg, seed)))
        .collect();
    let mut grid = GridResult {
        config: cfg.clone(),
        cells: Vec::new(),
        sources: Vec::new(),
        conditioning: Vec::new(),
        sweeps: Vec::new(),
        mtl: Vec::new(),
        seed_errors: Vec::new(),
    };
    for (seed, out) in outputs {
        match out {
            Ok(o) => {
                grid.cells.extend(o.cells);
                grid.sources.extend(o.sources);
                grid.conditioning.extend(o.conditioning);
                grid.sweeps.extend(o.sweeps);
                grid.mtl.extend(o.mtl);
            }
            Err(e) => {
                warn!("seed {seed}: {e}");
                grid.cells.extend(failed_cells(cfg, seed, &e));
                grid.seed_errors.push((seed, e));
            }
        }
    }
    Ok(grid)
}

fn cell_keys(cfg: &ScenarioConfig) -> Vec<(ScenarioKind, Arm, MergeMethod)> {
    let mut keys = Vec::new();
    for &s in &cfg.scenarios {
        for arm in Arm::ALL {
            for &m in &cfg.merge.methods {
                keys.push((s, arm, m));
            }
        }
    }
    keys
}

fn blank_cell(
    seed: u64,
    (scenario, arm, method): (ScenarioKind, Arm, MergeMethod),
    status: CellStatus,
) -> CellResult {
    CellResult {
        seed,
        scenario,
        arm,
        method,
        status,
        runs: Vec::new(),
        summary: None,
        test_reads: Vec::new(),
        reliability: None,
    }
}

fn failed_cells(cfg: &ScenarioConfig, seed: u64, error: &str) -> Vec<CellResult> {
    cell_keys(cfg)
        .into_iter()
        .map(|k| {
            blank_cell(
                seed,
                k,
                CellStatus::Fail {
                    error: format!("seed setup failed: {error}"),
                },
            )
        })
        .collect()
}

/// Why an arm does not apply to a scenario, if it does not.
fn arm_skip_reason(cfg: &ScenarioConfig, scenario: ScenarioKind, arm: Arm) -> Option<String> {
    match arm {
        Arm::Raw => None,
        Arm::ScaledOnly if !cfg.scaled_only_arm => {
            Some("scaled_only arm disabled in config".into())
        }
        Arm::ScaledOnly if !scenario.has_norm_mismatch() => {
            Some("no norm mismatch: κ rescaling applies only to an oversized task vector".into())
        }
        Arm::Distac if !cfg.distac.enabled => Some("distillation disabled in config".into()),
        Arm::Distac if scenario == ScenarioKind::Original => {
            Some("no task vector is flagged for conditioning".into())
        }
        _ => None,
    }
}

fn run_seed(cfg: &ScenarioConfig, seed: u64) -> std::result::Result<SeedOutput, String> {
    let ctx = prepare_seed(cfg, seed).map_err(err_string)?;
    info!("seed {seed}: pretrained {} parameters", ctx.theta_pre.len());
    let plans: Vec<(ScenarioKind, Vec<RunPlan>)> = cfg
        .scenarios
        .iter()
        .map(|&s| (s, runs_for(s, cfg.num_tasks)))
        .collect();

    let mut keys: Vec<FtKey> = plans
        .iter()
        .flat_map(|(_, runs)| runs.iter().flat_map(|r| r.sources.clone()))
        .collect();
    keys.extend((0..cfg.num_tasks).map(|task| FtKey {
        task,
        high_lr: false,
        low_confidence: false,
    }));
    keys.sort();
    keys.dedup();

    let guard_free_test: Vec<&LabeledSet> = ctx.suite.tasks.iter().map(|t| &t.test).collect();
    let trained: Vec<(FtKey, std::result::Result<Source, String>, SourceRecord)> = keys
        .par_iter()
        .map(|&key| {
            let tc = finetune_config(cfg, seed, key.task, key.high_lr, key.low_confidence);
            let (src, rec) = train_source(cfg, &ctx, &tc, key, guard_free_test[key.task]);
            (key, src, rec)
        })
        .collect();
    let sources: BTreeMap<FtKey, std::result::Result<Source, String>> = trained
        .iter()
        .map(|(k, s, _)| (*k, s.as_ref().map(clone_source).map_err(Clone::clone)))
        .collect();
    let source_records: Vec<SourceRecord> = trained.into_iter().map(|(_, _, r)| r).collect();

    // Distillation jobs per run, deduplicated across runs.
    let mut jobs: Vec<KdJob> = Vec::new();
    let mut run_jobs: BTreeMap<(ScenarioKind, usize), std::result::Result<Vec<KdJob>, String>> =
        BTreeMap::new();
    for (scenario, runs) in &plans {
        for plan in runs {
            let planned = plan_conditioning(cfg, *scenario, plan, &sources);
            if let Ok(list) = &planned {
                for j in list {
                    if !jobs.iter().any(|x| x.same(j)) {
                        jobs.push(*j);
                    }
                }
            }
            run_jobs.insert((*scenario, plan.run), planned);
        }
    }
    if !cfg.distac.enabled {
        jobs.clear();
    }
    let conditioned: Vec<(
        KdJob,
        std::result::Result<ParamVector, String>,
        ConditionRecord,
    )> = jobs
        .par_iter()
        .map(|job| {
            let (theta, rec) = run_job(cfg, &ctx, job, &sources);
            (*job, theta, rec)
        })
        .collect();

    let keys = cell_keys(cfg);
    let cells: Vec<CellResult> = keys
        .par_iter()
        .map(|&(scenario, arm, method)| {
            if let Some(reason) = arm_skip_reason(cfg, scenario, arm) {
                return blank_cell(
                    seed,
                    (scenario, arm, method),
                    CellStatus::Skipped { reason },
                );
            }
            let runs = &plans.iter().find(|(s, _)| *s == scenario).unwrap().1;
            run_cell(
                cfg,
                &ctx,
                scenario,
                arm,
                method,
                runs,
                &sources,
                &run_jobs,
                &conditioned,
            )
        })
        .collect();

    let sweeps = ctx
        .suite
        .tasks
        .par_iter()
        .enumerate()
        .filter_map(|(t, task)| {
            let key = FtKey {
                task: t,
                high_lr: false,
                low_confidence: false,
            };
            let src = sources.get(&key)?.as_ref().ok()?;
            let points = scaling_sweep(
                &ctx.spec,
                &ctx.theta_pre,
                &src.tau.delta,
                &task.test,
                &default_kappa_grid(),
            )
            .ok()?;
            Some(SweepRecord {
                seed,
                task: t,
                points,
            })
        })
        .collect();

    let mtl = cfg
        .mtl_reference
        .then(|| mtl_reference(cfg, &ctx, &sources));
    Ok(SeedOutput {
        cells,
        sources: source_records,
        conditioning: conditioned.into_iter().map(|(_, _, r)| r).collect(),
        sweeps,
        mtl,
    })
}

fn clone_source(s: &Source) -> Source {
    Source {
        theta: s.theta.clone(),
        tau: s.tau.clone(),
        test_accuracy: s.test_accuracy,
    }
}

fn train_source(
    cfg: &ScenarioConfig,
    ctx: &SeedContext,
    tc: &TrainConfig,
    key: FtKey,
    test: &LabeledSet,
) -> (std::result::Result<Source, String>, SourceRecord) {
    let mut rec = SourceRecord {
        seed: ctx.seed,
        task: key.task,
        high_lr: key.high_lr,
        low_confidence: key.low_confidence,
        learning_rate: tc.learning_rate,
        loss: tc.loss,
        norm: f64::NAN,
        test_accuracy: f64::NAN,
        test_entropy: f64::NAN,
        val_accuracy: f64::NAN,
        ece: f64::NAN,
        error: None,
    };
    let task = &ctx.suite.tasks[key.task];
    let result = (|| -> Result<Source> {
        let theta = finetune(&ctx.spec, &ctx.theta_pre, &task.train, tc)?.theta;
        let tau = compute_task_vector(&theta, &ctx.theta_pre, &task.id, Some(tc.clone()))?;
        let logits = window_logits(&ctx.spec, &theta, test)?;
        let acc = accuracy_of_logits(&logits, test.labels());
        let (conf, correct) = confidences(&logits, test.labels());
        rec.norm = tau.norm();
        rec.test_accuracy = acc;
        rec.test_entropy = mean_entropy_of_logits(&logits);
        rec.ece = reliability_from_predictions(&conf, &correct, cfg.reliability_bins)?.ece;
        rec.val_accuracy = accuracy_of_logits(
            &window_logits(&ctx.spec, &theta, &task.val)?,
            task.val.labels(),
        );
        Ok(Source {
            theta,
            tau,
            test_accuracy: acc,
        })
    })()
    .map_err(err_string);
    if let Err(e) = &result {
        rec.error = Some(e.clone());
    }
    (result, rec)
}

fn confidences(logits: &[Vec<f64>], labels: &[usize]) -> (Vec<f64>, Vec<bool>) {
    logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let p = probabilities(z);
            let k = argmax(&p);
            (p[k], k == y)
        })
        .unzip()
}

/// Which sources of a run get distilled, and with which profile.
fn plan_conditioning(
    cfg: &ScenarioConfig,
    scenario: ScenarioKind,
    plan: &RunPlan,
    sources: &BTreeMap<FtKey, std::result::Result<Source, String>>,
) -> std::result::Result<Vec<KdJob>, String> {
    let d = &cfg.distac;
    let mut jobs = Vec::new();
    let mut nm_target = None;
    if scenario.has_norm_mismatch() {
        let norms = plan
            .sources
            .iter()
            .map(|k| {
                sources[k]
                    .as_ref()
                    .map(|s| s.tau.norm())
                    .map_err(Clone::clone)
            })
            .collect::<std::result::Result<Vec<f64>, String>>()?;
        let (idx, kappa) = choose_kappa_norm_match(&norms).map_err(err_string)?;
        jobs.push(KdJob {
            key: plan.sources[idx],
            kappa,
            temps: d.norm_mismatch_temperatures,
            norm_match: true,
        });
        nm_target = Some(idx);
    }
    if scenario.has_low_confidence() {
        for (i, k) in plan.sources.iter().enumerate() {
            if Some(i) != nm_target {
                jobs.push(KdJob {
                    key: *k,
                    kappa: d.low_confidence_kappa,
                    temps: d.low_confidence_temperatures,
                    norm_match: false,
                });
            }
        }
    }
    Ok(jobs)
}

fn run_job(
    cfg: &ScenarioConfig,
    ctx: &SeedContext,
    job: &KdJob,
    sources: &BTreeMap<FtKey, std::result::Result<Source, String>>,
) -> (std::result::Result<ParamVector, String>, ConditionRecord) {
    let mut rec = ConditionRecord {
        seed: ctx.seed,
        task: job.key.task,
        high_lr: job.key.high_lr,
        low_confidence: job.key.low_confidence,
        kappa: job.kappa,
        t_teacher: job.temps.0,
        t_student: job.temps.1,
        tau_norm: f64::NAN,
        conditioned_norm: f64::NAN,
        norm_ratio: f64::NAN,
        teacher_accuracy: f64::NAN,
        student_accuracy: f64::NAN,
        teacher_entropy: f64::NAN,
        student_entropy: f64::NAN,
        error: None,
        history: Vec::new(),
    };
    let src = match &sources[&job.key] {
        Ok(s) => s,
        Err(e) => {
            rec.error = Some(format!("source model unavailable: {e}"));
            return (Err(rec.error.clone().unwrap()), rec);
        }
    };
    let task = &ctx.suite.tasks[job.key.task];
    let kd: KdConfig = cfg
        .distac
        .kd_config(job.kappa, job.temps, distac_seed(ctx.seed, job));
    rec.tau_norm = src.tau.norm();
    let result = match distac_condition(
        &ctx.spec,
        &ctx.theta_pre,
        &src.tau.delta,
        &task.unlabeled,
        &kd,
    ) {
        Ok(run) => {
            rec.history = run.history;
            Ok(run.theta)
        }
        Err(f) => {
            rec.history = f.history;
            Err(f.error.to_string())
        }
    };
    let result = result.and_then(|theta| {
        (|| -> Result<ParamVector> {
            let norm = theta.sub(&ctx.theta_pre)?.norm();
            rec.conditioned_norm = norm;
            rec.norm_ratio = norm / (job.kappa * rec.tau_norm);
            let tl = window_logits(&ctx.spec, &src.theta, &task.test)?;
            let sl = window_logits(&ctx.spec, &theta, &task.test)?;
            rec.teacher_accuracy = accuracy_of_logits(&tl, task.test.labels());
            rec.student_accuracy = accuracy_of_logits(&sl, task.test.labels());
            rec.teacher_entropy = mean_entropy_of_logits(&tl);
            rec.student_entropy = mean_entropy_of_logits(&sl);
            Ok(theta)
        })()
        .map_err(err_string)
    });
    if let Err(e) = &result {
        rec.error = Some(e.clone());
    }
    (result, rec)
}

/// Task vectors merged by one arm of one run.
fn arm_task_vectors(
    ctx: &SeedContext,
    scenario: ScenarioKind,
    arm: Arm,
    plan: &RunPlan,
    sources: &BTreeMap<FtKey, std::result::Result<Source, String>>,
    run_jobs: &BTreeMap<(ScenarioKind, usize), std::result::Result<Vec<KdJob>, String>>,
    conditioned: &[(
        KdJob,
        std::result::Result<ParamVector, String>,
        ConditionRecord,
    )],
) -> std::result::Result<Vec<TaskVector>, String> {
    let mut taus = plan
        .sources
        .iter()
        .map(|k| {
            sources[k]
                .as_ref()
                .map(|s| s.tau.clone())
                .map_err(|e| format!("task {}: {e}", k.task))
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    if arm == Arm::Raw {
        return Ok(taus);
    }
    let jobs = run_jobs[&(scenario, plan.run)]
        .as_ref()
        .map_err(Clone::clone)?;
    for job in jobs {
        let slot = plan.sources.iter().position(|k| *k == job.key).unwrap();
        match arm {
            Arm::ScaledOnly if job.norm_match => taus[slot] = taus[slot].scaled(job.kappa),
            Arm::ScaledOnly => {}
            Arm::Distac => {
                let (_, theta, _) = conditioned
                    .iter()
                    .find(|(j, _, _)| j.same(job))
                    .ok_or_else(|| "distillation job missing".to_string())?;
                let theta = theta
                    .as_ref()
                    .map_err(|e| format!("task {} distillation: {e}", job.key.task))?;
                let meta = taus[slot].train_meta.clone();
                taus[slot] = compute_task_vector(theta, &ctx.theta_pre, &taus[slot].task_id, meta)
                    .map_err(err_string)?;
            }
            Arm::Raw => unreachable!(),
        }
    }
    Ok(taus)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &ScenarioConfig,
    ctx: &SeedContext,
    scenario: ScenarioKind,
    arm: Arm,
    method: MergeMethod,
    runs: &[RunPlan],
    sources: &BTreeMap<FtKey, std::result::Result<Source, String>>,
    run_jobs: &BTreeMap<(ScenarioKind, usize), std::result::Result<Vec<KdJob>, String>>,
    conditioned: &[(
        KdJob,
        std::result::Result<ParamVector, String>,
        ConditionRecord,
    )],
) -> CellResult {
    let key = (scenario, arm, method);
    let guard = GuardedTest::new(&ctx.suite);
    let mcfg = cfg.merge.config_for(method);
    let val: Vec<&LabeledSet> = ctx.suite.tasks.iter().map(|t| &t.val).collect();
    let mut evals = Vec::with_capacity(runs.len());
    let mut conf_all = Vec::new();
    let mut correct_all = Vec::new();
    for plan in runs {
        let outcome = (|| -> std::result::Result<RunEval, String> {
            let taus = arm_task_vectors(ctx, scenario, arm, plan, sources, run_jobs, conditioned)?;
            let individual: Vec<f64> = plan
                .sources
                .iter()
                .map(|k| {
                    sources[k]
                        .as_ref()
                        .map(|s| s.test_accuracy)
                        .unwrap_or(f64::NAN)
                })
                .collect();
            let search = tune_lambda_on(&ctx.spec, &ctx.theta_pre, &taus, &mcfg, &val)
                .map_err(err_string)?;
            let direction = merged_direction(&taus, &mcfg).map_err(err_string)?;
            let theta = ctx
                .theta_pre
                .add_scaled(&direction, search.best)
                .map_err(err_string)?;
            let val_score = search
                .scores
                .iter()
                .find(|(l, _)| *l == search.best)
                .map(|(_, s)| *s)
                .unwrap_or(f64::NAN);

            let mut per_task = Vec::with_capacity(ctx.suite.tasks.len());
            for (t, task) in ctx.suite.tasks.iter().enumerate() {
                let test = guard.read(t);
                let logits = window_logits(&ctx.spec, &theta, test).map_err(err_string)?;
                let acc = accuracy_of_logits(&logits, test.labels());
                let (conf, correct) = confidences(&logits, test.labels());
                conf_all.extend(conf);
                correct_all.extend(correct);
                per_task.push(TaskEval {
                    task_id: task.id.clone(),
                    accuracy: acc,
                    normalized_accuracy: normalized_accuracy(acc, individual[t])
                        .map_err(err_string)?,
                    entropy: mean_entropy_of_logits(&logits),
                });
            }
            let eval = EvalResult::from_tasks(per_task).map_err(err_string)?;

            let mut vlogits = Vec::new();
            let mut vlabels = Vec::new();
            for v in &val {
                vlogits.extend(window_logits(&ctx.spec, &theta, *v).map_err(err_string)?);
                vlabels.extend_from_slice(v.labels());
            }
            let temperature = fit_temperature(&vlogits, &vlabels).map_err(err_string)?;
            Ok(RunEval {
                run: plan.run,
                perturbed_task: plan.perturbed,
                lambda: search.best,
                val_accuracy: val_score,
                eval,
                val_nll: nll_at_temperature(&vlogits, &vlabels, 1.0),
                temperature,
                val_nll_scaled: nll_at_temperature(&vlogits, &vlabels, temperature),
            })
        })();
        match outcome {
            Ok(e) => evals.push(e),
            Err(error) => {
                let mut cell = blank_cell(
                    ctx.seed,
                    key,
                    CellStatus::Fail {
                        error: format!("run {}: {error}", plan.run),
                    },
                );
                cell.test_reads = guard.counts();
                cell.runs = evals;
                return cell;
            }
        }
    }
    let summary = average_runs(&evals);
    let reliability =
        reliability_from_predictions(&conf_all, &correct_all, cfg.reliability_bins).ok();
    let mut cell = blank_cell(ctx.seed, key, CellStatus::Pass);
    cell.summary = summary;
    cell.runs = evals;
    cell.test_reads = guard.counts();
    cell.reliability = reliability;
    cell
}

/// Task-wise mean over runs, then the usual means over tasks.
fn average_runs(runs: &[RunEval]) -> Option<EvalResult> {
    let first = runs.first()?;
    let n = runs.len() as f64;
    let per_task = (0..first.eval.per_task.len())
        .map(|t| {
            let mean = |f: fn(&TaskEval) -> f64| {
                runs.iter().map(|r| f(&r.eval.per_task[t])).sum::<f64>() / n
            };
            TaskEval {
                task_id: first.eval.per_task[t].task_id.clone(),
                accuracy: mean(|e| e.accuracy),
                normalized_accuracy: mean(|e| e.normalized_accuracy),
                entropy: mean(|e| e.entropy),
            }
        })
        .collect();
    EvalResult::from_tasks(per_task).ok()
}

fn mtl_reference(
    cfg: &ScenarioConfig,
    ctx: &SeedContext,
    sources: &BTreeMap<FtKey, std::result::Result<Source, String>>,
) -> MtlRecord {
    let result = (|| -> std::result::Result<EvalResult, String> {
        let train: Vec<&LabeledSet> = ctx.suite.tasks.iter().map(|t| &t.train).collect();
        let tc = TrainConfig {
            seed: mix_seed(ctx.seed, 0x3717),
            ..cfg.mtl.clone()
        };
        let theta = train_mtl(&ctx.spec, &ctx.theta_pre, &train, &tc)
            .map_err(err_string)?
            .theta;
        let mut per_task = Vec::new();
        for (t, task) in ctx.suite.tasks.iter().enumerate() {
            let key = FtKey {
                task: t,
                high_lr: false,
                low_confidence: false,
            };
            let individual = sources[&key].as_ref().map_err(Clone::clone)?.test_accuracy;
            let logits = window_logits(&ctx.spec, &theta, &task.test).map_err(err_string)?;
            let acc = accuracy_of_logits(&logits, task.test.labels());
            per_task.push(TaskEval {
                task_id: task.id.clone(),
                accuracy: acc,
                normalized_accuracy: normalized_accuracy(acc, individual).map_err(err_string)?,
                entropy: mean_entropy_of_logits(&logits),
            });
        }
        EvalResult::from_tasks(per_task).map_err(err_string)
    })();
    match result {
        Ok(eval) => MtlRecord {
            seed: ctx.seed,
            eval: Some(eval),
            error: None,
        },
        Err(e) => MtlRecord {
            seed: ctx.seed,
            eval: None,
            error: Some(e),
        },
    }
}
