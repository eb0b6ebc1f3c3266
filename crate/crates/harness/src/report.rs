//! Report files written from a [`GridResult`].
//!
//! ```text
//! results.json           the full grid, every cell with its status
//! table1.csv             seed-mean accuracy per (scenario, arm, method)
//! sources.csv            every fine-tuned source model
//! conditioning.csv       every distillation job
//! scaling_sweep.csv      accuracy of θ_pre + κτ over κ
//! history/*.csv          per-step distillation curves
//! reliability/*.csv      pooled reliability bins of each merged model
//! ```
//!
//! In `table1.csv` the `display` column reads `accuracy (normalized)`, both in
//! percent: absolute test accuracy first, normalized accuracy (mean over tasks
//! of merged / individual accuracy) in parentheses.

use std::path::{Path, PathBuf};

use taskmerge_core::distac::KdRecord;
use taskmerge_core::metrics::ReliabilityReport;

use crate::error::{Error, Result};
use crate::scenario::{Arm, CellStatus, ConditionRecord, GridResult};

/// Serde adapter storing NaN as `null` so failed records still round-trip.
pub mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// One row of `table1.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub scenario: String,
    pub arm: String,
    pub method: String,
    pub seeds: usize,
    pub accuracy: f64,
    pub normalized_accuracy: f64,
}

/// Seed means of passing cells. Arms with no passing cell in a scenario produce no rows.
pub fn table_rows(grid: &GridResult) -> Vec<TableRow> {
    let mut rows = Vec::new();
    for &scenario in &grid.config.scenarios {
        for arm in Arm::ALL {
            for &method in &grid.config.merge.methods {
                let summaries: Vec<_> = grid
                    .cells
                    .iter()
                    .filter(|c| c.scenario == scenario && c.arm == arm && c.method == method)
                    .filter(|c| c.status == CellStatus::Pass)
                    .filter_map(|c| c.summary.as_ref())
                    .collect();
                if summaries.is_empty() {
                    continue;
                }
                let n = summaries.len() as f64;
                rows.push(TableRow {
                    scenario: scenario.name().into(),
                    arm: arm.name().into(),
                    method: method.name().into(),
                    seeds: summaries.len(),
                    accuracy: summaries.iter().map(|s| s.mean_accuracy).sum::<f64>() / n,
                    normalized_accuracy: summaries
                        .iter()
                        .map(|s| s.mean_normalized_accuracy)
                        .sum::<f64>()
                        / n,
                });
            }
        }
    }
    rows
}

fn f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

/// Renders a header and rows with standard CSV quoting.
fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv write");
    for row in rows {
        w.write_record(&row).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
}

pub fn table_csv(grid: &GridResult) -> String {
    csv_string(
        &[
            "scenario",
            "arm",
            "method",
            "seeds",
            "accuracy",
            "normalized_accuracy",
            "display",
        ],
        table_rows(grid).into_iter().map(|r| {
            vec![
                r.scenario,
                r.arm,
                r.method,
                r.seeds.to_string(),
                f(r.accuracy),
                f(r.normalized_accuracy),
                format!(
                    "{:.1} ({:.1})",
                    100.0 * r.accuracy,
                    100.0 * r.normalized_accuracy
                ),
            ]
        }),
    )
}

fn sources_csv(grid: &GridResult) -> String {
    csv_string(
        &[
            "seed",
            "task",
            "high_lr",
            "low_confidence",
            "learning_rate",
            "norm",
            "test_accuracy",
            "test_entropy",
            "val_accuracy",
            "ece",
            "error",
        ],
        grid.sources.iter().map(|s| {
            vec![
                s.seed.to_string(),
                s.task.to_string(),
                s.high_lr.to_string(),
                s.low_confidence.to_string(),
                s.learning_rate.to_string(),
                f(s.norm),
                f(s.test_accuracy),
                f(s.test_entropy),
                f(s.val_accuracy),
                f(s.ece),
                s.error.clone().unwrap_or_default(),
            ]
        }),
    )
}

pub fn history_name(c: &ConditionRecord) -> String {
    format!(
        "seed{}_task{}_{}_{}_k{:.4}_t{}-{}.csv",
        c.seed,
        c.task,
        if c.high_lr { "highlr" } else { "baselr" },
        if c.low_confidence { "lowconf" } else { "ce" },
        c.kappa,
        c.t_teacher,
        c.t_student
    )
}

fn conditioning_csv(grid: &GridResult) -> String {
    csv_string(
        &[
            "seed",
            "task",
            "high_lr",
            "low_confidence",
            "kappa",
            "t_teacher",
            "t_student",
            "tau_norm",
            "conditioned_norm",
            "norm_ratio",
            "teacher_accuracy",
            "student_accuracy",
            "teacher_entropy",
            "student_entropy",
            "history",
            "error",
        ],
        grid.conditioning.iter().map(|c| {
            vec![
                c.seed.to_string(),
                c.task.to_string(),
                c.high_lr.to_string(),
                c.low_confidence.to_string(),
                f(c.kappa),
                c.t_teacher.to_string(),
                c.t_student.to_string(),
                f(c.tau_norm),
                f(c.conditioned_norm),
                f(c.norm_ratio),
                f(c.teacher_accuracy),
                f(c.student_accuracy),
                f(c.teacher_entropy),
                f(c.student_entropy),
                history_name(c),
                c.error.clone().unwrap_or_default(),
            ]
        }),
    )
}

/// Per-step distillation curve.
pub fn history_csv(history: &[KdRecord]) -> String {
    csv_string(
        &["step", "rel_accuracy", "rel_norm", "entropy", "loss"],
        history.iter().map(|h| {
            vec![
                h.step.to_string(),
                f(h.rel_accuracy),
                f(h.rel_norm),
                f(h.entropy),
                f(h.loss),
            ]
        }),
    )
}

fn sweep_csv(grid: &GridResult) -> String {
    csv_string(
        &["seed", "task", "kappa", "accuracy"],
        grid.sweeps.iter().flat_map(|s| {
            s.points.iter().map(move |(k, a)| {
                vec![
                    s.seed.to_string(),
                    s.task.to_string(),
                    format!("{k:.1}"),
                    f(*a),
                ]
            })
        }),
    )
}

fn reliability_csv(r: &ReliabilityReport) -> String {
    csv_string(
        &["lo", "hi", "confidence", "accuracy", "count"],
        r.bins.iter().map(|b| {
            vec![
                f(b.lo),
                f(b.hi),
                f(b.confidence),
                f(b.accuracy),
                b.count.to_string(),
            ]
        }),
    )
}

fn write(path: &Path, contents: &str) -> Result<PathBuf> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

pub fn results_json(grid: &GridResult) -> Result<String> {
    serde_json::to_string_pretty(grid)
        .map(|s| s + "\n")
        .map_err(|e| Error::Serialize(e.to_string()))
}

pub fn read_results(path: &Path) -> Result<GridResult> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serialize(format!("{}: {e}", path.display())))
}

/// Writes every report file under `out` and returns the paths in write order.
pub fn report_emit(grid: &GridResult, out: &Path) -> Result<Vec<PathBuf>> {
    if grid.cells.is_empty() {
        return Err(Error::Config("no results to report".into()));
    }
    let history = out.join("history");
    let reliability = out.join("reliability");
    for dir in [out, &history, &reliability] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut files = vec![
        write(&out.join("results.json"), &results_json(grid)?)?,
        write(&out.join("table1.csv"), &table_csv(grid))?,
        write(&out.join("sources.csv"), &sources_csv(grid))?,
        write(&out.join("conditioning.csv"), &conditioning_csv(grid))?,
        write(&out.join("scaling_sweep.csv"), &sweep_csv(grid))?,
    ];
    for c in &grid.conditioning {
        files.push(write(
            &history.join(history_name(c)),
            &history_csv(&c.history),
        )?);
    }
    for c in &grid.cells {
        if let Some(r) = &c.reliability {
            let name = format!(
                "seed{}_{}_{}_{}.csv",
                c.seed,
                c.scenario.name(),
                c.arm.name(),
                c.method.name()
            );
            files.push(write(&reliability.join(name), &reliability_csv(r))?);
        }
    }
    Ok(files)
}
