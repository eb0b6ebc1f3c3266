use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taskmerge_core::distac::{choose_kappa_norm_match, distac_condition};
use taskmerge_core::merge::{compute_task_vector, merge, tune_lambda_on, MergeMethod, TaskVector};
use taskmerge_core::metrics::evaluate;
use taskmerge_core::theory::{theory_sweep, MergeCoeffs, QuadGenerator};
use taskmerge_core::train::{finetune, pretrain};
use taskmerge_harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use taskmerge_harness::config::{ScenarioConfig, OUT_ENV};
use taskmerge_harness::dataset::{load_suite, TaskSuite};
use taskmerge_harness::report::{history_csv, read_results, report_emit, table_csv};
use taskmerge_harness::scenario::{finetune_config, pretrain_config, run_scenario, seed_dataset};

#[derive(Parser)]
#[command(name = "taskmerge", version, about = "Task-vector merging experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration layered over the built-in defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ScenarioConfig> {
        Ok(ScenarioConfig::load(
            self.config.as_deref(),
            &self.overrides,
        )?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// Shrink to the mean norm of the other task vectors, (T_tcr, T_stu) = (10, 10).
    NormMismatch,
    /// κ = 1, (T_tcr, T_stu) = (1, 10).
    LowConfidence,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the shared model on the shifted pretraining mixture.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint file to write.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fine-tune one task from a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        task: usize,
        #[arg(long)]
        pretrained: PathBuf,
        /// Multiply the learning rate by `high_lr_factor`.
        #[arg(long)]
        high_lr: bool,
        /// Train with the configured confidence-lowering objective.
        #[arg(long)]
        low_confidence: bool,
        /// Checkpoint file to write.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Merge fine-tuned checkpoints (given in task order) and evaluate the result.
    Merge {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long, default_value = "task_arithmetic")]
        method: MergeMethod,
        /// Fixed λ; tuned on the validation splits when absent.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(required = true, num_args = 2..)]
        models: Vec<PathBuf>,
        /// Checkpoint file to write.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Condition one fine-tuned checkpoint by distillation on unlabeled data.
    Distac {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        task: usize,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        profile: Profile,
        /// Other fine-tuned checkpoints whose norms set κ for the norm-mismatch profile.
        #[arg(long = "peer")]
        peers: Vec<PathBuf>,
        /// Explicit κ, overriding the profile's rule.
        #[arg(long)]
        kappa: Option<f64>,
        /// Checkpoint file to write.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run the scenario grid and write every report.
    Scenario {
        #[command(flatten)]
        common: Common,
        /// Output directory (default: config `output_dir`, then $TASKMERGE_OUT, then ./out).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Sweep the calibration weight on a seeded two-task quadratic instance.
    Theory {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        /// Merge weight of the first task vector.
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        /// Merge weight of the second task vector.
        #[arg(long, default_value_t = 0.01)]
        beta: f64,
        /// Zero calibration curvature (`A = 0`).
        #[arg(long)]
        flat_penalty: bool,
        #[arg(long, default_value_t = 1)]
        eval_task: usize,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0.2,0.1,0.05,0.025,0.01,0.001"
        )]
        lambdas: Vec<f64>,
        /// CSV destination; stdout when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Rewrite the report files from an existing results.json.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn suite_for(cfg: &ScenarioConfig, seed: u64) -> Result<TaskSuite> {
    Ok(load_suite(&seed_dataset(cfg, seed), cfg.num_tasks)?)
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    save_checkpoint(&ck.model, &ck.theta, path)
        .with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Pretrain { common, seed, out } => {
            let cfg = common.load()?;
            let suite = suite_for(&cfg, seed)?;
            let model = cfg.model_spec(suite.input_dim, suite.num_classes);
            let run = pretrain(&model, &suite.pretrain_refs(), &pretrain_config(&cfg, seed))?;
            save(
                &Checkpoint {
                    model,
                    theta: run.theta,
                },
                &out,
            )?;
        }
        Command::Finetune {
            common,
            seed,
            task,
            pretrained,
            high_lr,
            low_confidence,
            out,
        } => {
            let cfg = common.load()?;
            let suite = suite_for(&cfg, seed)?;
            let data = suite
                .tasks
                .get(task)
                .with_context(|| format!("task {task} out of range"))?;
            let pre = load(&pretrained)?;
            let tc = finetune_config(&cfg, seed, task, high_lr, low_confidence);
            let run = finetune(&pre.model, &pre.theta, &data.train, &tc)?;
            let tau = run.theta.sub(&pre.theta)?;
            eprintln!(
                "task {task}: ‖τ‖ = {:.4}, final loss {:.4}",
                tau.norm(),
                run.history.last().map_or(f64::NAN, |r| r.loss)
            );
            save(
                &Checkpoint {
                    model: pre.model,
                    theta: run.theta,
                },
                &out,
            )?;
        }
        Command::Merge {
            common,
            seed,
            pretrained,
            method,
            lambda,
            models,
            out,
        } => {
            let cfg = common.load()?;
            let suite = suite_for(&cfg, seed)?;
            if models.len() != suite.tasks.len() {
                bail!(
                    "{} checkpoints for {} tasks",
                    models.len(),
                    suite.tasks.len()
                );
            }
            let pre = load(&pretrained)?;
            let mut taus: Vec<TaskVector> = Vec::new();
            let mut individual = Vec::new();
            for (t, path) in models.iter().enumerate() {
                let ck = load(path)?;
                individual.push(taskmerge_core::metrics::accuracy(
                    &ck.model,
                    &ck.theta,
                    &suite.tasks[t].test,
                )?);
                taus.push(compute_task_vector(
                    &ck.theta,
                    &pre.theta,
                    &suite.tasks[t].id,
                    None,
                )?);
            }
            let mut mcfg = cfg.merge.config_for(method);
            mcfg.lambda = match lambda {
                Some(l) => l,
                None => {
                    let val: Vec<_> = suite.tasks.iter().map(|t| &t.val).collect();
                    tune_lambda_on(&pre.model, &pre.theta, &taus, &mcfg, &val)?.best
                }
            };
            let theta = merge(&pre.theta, &taus, &mcfg)?;
            let tasks: Vec<_> = suite
                .tasks
                .iter()
                .zip(&individual)
                .map(|(t, &a)| (t.id.as_str(), &t.test, a))
                .collect();
            let eval = evaluate(&pre.model, &theta, &tasks)?;
            println!(
                "{}",
                serde_json::to_string_pretty(
                    &serde_json::json!({ "method": method, "lambda": mcfg.lambda, "eval": eval })
                )?
            );
            save(
                &Checkpoint {
                    model: pre.model,
                    theta,
                },
                &out,
            )?;
        }
        Command::Distac {
            common,
            seed,
            task,
            pretrained,
            model,
            profile,
            peers,
            kappa,
            out,
        } => {
            let cfg = common.load()?;
            let suite = suite_for(&cfg, seed)?;
            let data = suite
                .tasks
                .get(task)
                .with_context(|| format!("task {task} out of range"))?;
            let pre = load(&pretrained)?;
            let ft = load(&model)?;
            let tau = ft.theta.sub(&pre.theta)?;
            let (temps, kappa) = match profile {
                Profile::LowConfidence => (
                    cfg.distac.low_confidence_temperatures,
                    kappa.unwrap_or(cfg.distac.low_confidence_kappa),
                ),
                Profile::NormMismatch => {
                    let k = match kappa {
                        Some(k) => k,
                        None => {
                            if peers.is_empty() {
                                bail!("norm-mismatch profile needs --peer checkpoints or an explicit --kappa");
                            }
                            let mut norms = vec![tau.norm()];
                            for p in &peers {
                                norms.push(load(p)?.theta.sub(&pre.theta)?.norm());
                            }
                            let (idx, k) = choose_kappa_norm_match(&norms)?;
                            if idx != 0 {
                                eprintln!("warning: checkpoint {} has the largest norm, not the conditioned model", peers[idx - 1].display());
                            }
                            k
                        }
                    };
                    (cfg.distac.norm_mismatch_temperatures, k)
                }
            };
            let kd = cfg.distac.kd_config(kappa, temps, seed);
            let run = distac_condition(&pre.model, &pre.theta, &tau, &data.unlabeled, &kd)
                .map_err(|f| f.error)?;
            let hist = out.with_extension("history.csv");
            std::fs::write(&hist, history_csv(&run.history))
                .with_context(|| hist.display().to_string())?;
            eprintln!("κ = {kappa:.4}; history in {}", hist.display());
            save(
                &Checkpoint {
                    model: pre.model,
                    theta: run.theta,
                },
                &out,
            )?;
        }
        Command::Scenario { common, out } => {
            let cfg = common.load()?;
            let dir = cfg.output_root(out.as_deref());
            let grid = run_scenario(&cfg)?;
            let files = report_emit(&grid, &dir)?;
            print!("{}", table_csv(&grid));
            eprintln!(
                "wrote {} files under {} (override with --out or ${OUT_ENV})",
                files.len(),
                dir.display()
            );
        }
        Command::Theory {
            seed,
            dim,
            alpha,
            beta,
            flat_penalty,
            eval_task,
            lambdas,
            out,
        } => {
            let gen = QuadGenerator {
                dim,
                a_eigs: if flat_penalty {
                    None
                } else {
                    QuadGenerator::default().a_eigs
                },
                ..QuadGenerator::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q1 = gen.sample(0.0, &mut rng)?;
            let q2 = gen.sample(0.0, &mut rng)?;
            let rows = theory_sweep(
                &q1,
                &q2,
                MergeCoeffs::new(alpha, beta)?,
                eval_task,
                &lambdas,
            )?;
            let mut text =
                String::from("lambda,exact_delta,firstorder_delta,error,spectral_norm\n");
            for r in rows {
                text += &format!(
                    "{},{:e},{:e},{:e},{}\n",
                    r.lambda, r.exact_delta, r.firstorder_delta, r.error, r.spectral_norm
                );
            }
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| p.display().to_string())?,
                None => print!("{text}"),
            }
        }
        Command::Report { results, out } => {
            let grid = read_results(&results)?;
            let dir =
                out.unwrap_or_else(|| results.parent().map(Path::to_path_buf).unwrap_or_default());
            let files = report_emit(&grid, &dir)?;
            eprintln!("wrote {} files under {}", files.len(), dir.display());
        }
        Command::ShowConfig { common } => print!("{}", common.load()?.to_toml_string()?),
    }
    Ok(())
}
