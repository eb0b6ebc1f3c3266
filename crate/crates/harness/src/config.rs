//! Experiment configuration: one TOML file layered over the defaults, then
//! `section.key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taskmerge_core::distac::{KdConfig, KdOptimizer};
use taskmerge_core::merge::{default_lambda_grid, MergeConfig, MergeMethod, RankPolicy};
use taskmerge_core::model::{Activation, ModelSpec};
use taskmerge_core::optim::Schedule;
use taskmerge_core::train::{LossSpec, TrainConfig};

use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "TASKMERGE_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Every task fine-tuned with the base recipe.
    Original,
    /// One task per run fine-tuned at a multiplied learning rate.
    NormMismatch,
    /// Every task fine-tuned with the confidence-lowering objective.
    LowConfidence,
    /// Both perturbations at once.
    Combined,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Original,
        ScenarioKind::NormMismatch,
        ScenarioKind::LowConfidence,
        ScenarioKind::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Original => "original",
            ScenarioKind::NormMismatch => "norm_mismatch",
            ScenarioKind::LowConfidence => "low_confidence",
            ScenarioKind::Combined => "combined",
        }
    }

    pub fn has_norm_mismatch(self) -> bool {
        matches!(self, ScenarioKind::NormMismatch | ScenarioKind::Combined)
    }

    pub fn has_low_confidence(self) -> bool {
        matches!(self, ScenarioKind::LowConfidence | ScenarioKind::Combined)
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMethod {
    LabelSmoothing,
    Mixup,
    Focal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![32, 32],
            activation: Activation::Relu,
        }
    }
}

/// Merge methods to run and the knobs shared by all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSettings {
    pub methods: Vec<MergeMethod>,
    pub lambda_grid: Vec<f64>,
    pub ties_keep_fraction: f64,
    pub consensus_k: usize,
    pub tall_weight: f64,
    pub tsvm_rank_policy: RankPolicy,
}

impl Default for MergeSettings {
    fn default() -> Self {
        let base = MergeConfig::default();
        Self {
            methods: MergeMethod::ALL.to_vec(),
            lambda_grid: default_lambda_grid(),
            ties_keep_fraction: base.ties_keep_fraction,
            consensus_k: base.consensus_k,
            tall_weight: base.tall_weight,
            tsvm_rank_policy: base.tsvm_rank_policy,
        }
    }
}

impl MergeSettings {
    pub fn config_for(&self, method: MergeMethod) -> MergeConfig {
        MergeConfig {
            method,
            lambda: 1.0,
            lambda_grid: self.lambda_grid.clone(),
            ties_keep_fraction: self.ties_keep_fraction,
            consensus_k: self.consensus_k,
            tall_weight: self.tall_weight,
            tsvm_rank_policy: self.tsvm_rank_policy,
        }
    }
}

/// Distillation settings shared by both conditioning profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistacSettings {
    pub enabled: bool,
    pub beta: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: KdOptimizer,
    /// `(T_tcr, T_stu)` when shrinking an oversized task vector.
    pub norm_mismatch_temperatures: (f64, f64),
    /// `(T_tcr, T_stu)` when sharpening a low-confidence model.
    pub low_confidence_temperatures: (f64, f64),
    pub low_confidence_kappa: f64,
}

impl Default for DistacSettings {
    fn default() -> Self {
        let kd = KdConfig::default();
        Self {
            enabled: true,
            beta: kd.beta,
            steps: kd.steps,
            learning_rate: 1e-4,
            batch_size: kd.batch_size,
            optimizer: kd.optimizer,
            norm_mismatch_temperatures: (10.0, 10.0),
            low_confidence_temperatures: (1.0, 10.0),
            low_confidence_kappa: 1.0,
        }
    }
}

impl DistacSettings {
    pub fn kd_config(&self, kappa: f64, temperatures: (f64, f64), seed: u64) -> KdConfig {
        KdConfig {
            kappa,
            t_teacher: temperatures.0,
            t_student: temperatures.1,
            beta: self.beta,
            steps: self.steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenarios: Vec<ScenarioKind>,
    pub num_tasks: usize,
    pub seeds: Vec<u64>,
    pub confidence_method: ConfidenceMethod,
    pub smoothing_alpha: f64,
    pub focal_gamma: f64,
    /// Learning-rate multiplier of the perturbed task in norm-mismatch runs.
    pub high_lr_factor: f64,
    /// Adds the κ-rescaling-without-distillation arm to norm-mismatch cells.
    pub scaled_only_arm: bool,
    /// Also trains a joint multi-task model as an upper reference.
    pub mtl_reference: bool,
    pub reliability_bins: usize,
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub mtl: TrainConfig,
    pub merge: MergeSettings,
    pub distac: DistacSettings,
    pub output_dir: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let finetune = TrainConfig {
            learning_rate: 3e-3,
            steps: 1000,
            warmup_steps: 100,
            schedule: Schedule::Cosine,
            weight_decay: 0.1,
            batch_size: 64,
            loss: LossSpec::CrossEntropy,
            seed: 0,
            freeze_head: true,
        };
        Self {
            scenarios: vec![
                ScenarioKind::Original,
                ScenarioKind::NormMismatch,
                ScenarioKind::LowConfidence,
            ],
            num_tasks: 4,
            seeds: vec![0, 1, 2],
            confidence_method: ConfidenceMethod::LabelSmoothing,
            smoothing_alpha: LossSpec::DEFAULT_SMOOTHING,
            focal_gamma: LossSpec::DEFAULT_FOCAL_GAMMA,
            high_lr_factor: 10.0,
            scaled_only_arm: true,
            mtl_reference: true,
            reliability_bins: 15,
            model: ModelConfig::default(),
            dataset: DatasetSpec::default(),
            pretrain: TrainConfig {
                learning_rate: 3e-3,
                steps: 1000,
                warmup_steps: 100,
                freeze_head: false,
                ..finetune.clone()
            },
            mtl: TrainConfig {
                steps: 2000,
                ..finetune.clone()
            },
            finetune,
            merge: MergeSettings::default(),
            distac: DistacSettings::default(),
            output_dir: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scenarios.is_empty() {
            return bad("no scenarios selected".into());
        }
        if self.num_tasks < 2 {
            return bad(format!(
                "merging needs at least 2 tasks, got {}",
                self.num_tasks
            ));
        }
        if self.seeds.is_empty() {
            return bad("no seeds".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("duplicate seeds".into());
        }
        if !(self.high_lr_factor > 0.0) {
            return bad("high_lr_factor must be positive".into());
        }
        if self.merge.methods.is_empty() {
            return bad("no merge methods".into());
        }
        if self.reliability_bins == 0 {
            return bad("reliability_bins must be positive".into());
        }
        self.dataset.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.mtl.validate()?;
        self.model_spec(1, 2).validate()?;
        for m in &self.merge.methods {
            crate::scenario::check_merge_config(&self.merge.config_for(*m))?;
        }
        if self.distac.enabled {
            self.distac
                .kd_config(1.0, self.distac.norm_mismatch_temperatures, 0)
                .validate()?;
            self.distac
                .kd_config(
                    self.distac.low_confidence_kappa,
                    self.distac.low_confidence_temperatures,
                    0,
                )
                .validate()?;
        }
        Ok(())
    }

    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            num_classes,
            activation: self.model.activation,
        }
    }

    /// Objective for the low-confidence fine-tunes.
    pub fn low_confidence_loss(&self) -> LossSpec {
        match self.confidence_method {
            ConfidenceMethod::LabelSmoothing => LossSpec::LabelSmoothing {
                alpha: self.smoothing_alpha,
            },
            ConfidenceMethod::Mixup => LossSpec::Mixup,
            ConfidenceMethod::Focal => LossSpec::Focal {
                gamma: self.focal_gamma,
            },
        }
    }

    /// Output root: explicit flag, then config file, then the environment, then `./out`.
    pub fn output_root(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Defaults, overlaid with `file` (if any), overlaid with `key.path=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match file {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut base =
            toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        overlay(&mut base, user);
        for o in overrides {
            apply_override(&mut base, o)?;
        }
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Recursively replaces entries of `base` with those of `user`; tables merge key by key.
fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML value, falling back to a string.
pub fn apply_override(base: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().unwrap();
    let mut table = base;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path}: {k} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
