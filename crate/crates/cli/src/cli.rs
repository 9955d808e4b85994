//! Command-line grammar and dispatch.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gxssl_core::evaluate::{write_report, InitMode};
use gxssl_core::manifest::Split;
use gxssl_core::synthgen::SynthConfig;
use log::info;

use crate::config::{parse_config, parse_synth_config, ExperimentConfig};
use crate::pipeline::{self, resolve_input};
use crate::run_manifest::{RunManifest, RUN_MANIFEST_FILE};
use crate::sweep::{run_sweep, ExperimentPlan};

#[derive(Debug, Parser)]
#[command(name = "gxssl", version, about = "Teacher-student self-supervised pretraining for radiograph patches")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort (PNG images, masks, manifest).
    Synth(SynthArgs),
    /// Tile a cohort into labelled patches.
    Patch(PatchArgs),
    /// Self-supervised pretraining.
    Pretrain(PretrainArgs),
    /// Few-label fine-tuning of the pretrained encoder (or from scratch).
    Finetune(FinetuneArgs),
    /// Patient-level evaluation of a fine-tuned model.
    Evaluate(EvaluateArgs),
    /// Fine-tune and evaluate over the seed × few-shot × init grid.
    Sweep(SweepArgs),
    /// Finite-difference check of the loss gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub patients: usize,
    /// Generator settings as a JSON object; omitted keys keep their defaults
    /// and the flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Default 0.5.
    #[arg(long)]
    pub positive_frac: Option<f64>,
    /// Default 512.
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Default 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Split recorded in the manifest: ssl_train, finetune_train, finetune_val or test.
    #[arg(long, default_value = "ssl_train")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct PatchArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Write crops.bin + crops.index.json instead of one PNG per crop.
    #[arg(long)]
    pub packed: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pretraining run/checkpoint directory, or `scratch`.
    #[arg(long)]
    pub ckpt: String,
    #[arg(long)]
    pub labeled_patients: usize,
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the config stored in the SSL checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 200)]
    pub coordinates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional JSON report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn parse_split(s: &str) -> Result<Split> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).with_context(|| format!("unknown split `{s}`"))
}

fn config_or_default(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => parse_config(&resolve_input(p)),
        None => Ok(ExperimentConfig::default().resolved()),
    }
}

/// Runs `work` between writing and finalizing a run manifest.
fn tracked<T>(
    manifest_path: PathBuf,
    subcommand: &str,
    config: serde_json::Value,
    deterministic: bool,
    inputs: &[&Path],
    work: impl FnOnce(&mut RunManifest) -> Result<T>,
) -> Result<T> {
    let mut run = RunManifest::begin(manifest_path, subcommand, config, deterministic, inputs)?;
    let result = work(&mut run);
    run.finish(&result)?;
    result
}

/// Exit status: 0 on success, 1 on failure (usage errors exit 2 from clap).
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth(a) => {
            let mut cfg = match &a.config {
                Some(p) => parse_synth_config(&resolve_input(p))?,
                None => SynthConfig::default(),
            };
            cfg.image_size = a.image_size.unwrap_or(cfg.image_size);
            cfg.positive_fraction = a.positive_frac.unwrap_or(cfg.positive_fraction);
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            let split = parse_split(&a.split)?;
            let echo = serde_json::to_value(&cfg)?;
            tracked(a.out.join(RUN_MANIFEST_FILE), "synth", echo, true, &[], |run| {
                let path = pipeline::synth(&cfg, a.patients, split, &a.out)?;
                run.add_output(path);
                Ok(())
            })?;
        }
        Command::Patch(a) => {
            let mut cfg = config_or_default(a.config.as_deref())?;
            if let Some(p) = a.patch_size {
                cfg.tiling.patch_size = p;
            }
            if let Some(s) = a.stride {
                cfg.tiling.stride = s;
            }
            cfg.validate()?;
            let manifest_path = resolve_input(&a.manifest);
            let manifest = pipeline::load_manifest(&manifest_path)?;
            tracked(a.out.join(RUN_MANIFEST_FILE), "patch", cfg.to_json(), true, &[&manifest_path], |run| {
                let out = pipeline::patch(&manifest, &cfg, &a.out, a.packed)?;
                info!("{} patches indexed", out.records.len());
                run.add_output(out.manifest);
                Ok(())
            })?;
        }
        Command::Pretrain(a) => {
            let config_path = resolve_input(&a.config);
            let cfg = parse_config(&config_path)?;
            let manifest_path = resolve_input(&a.manifest);
            let manifest = pipeline::load_manifest(&manifest_path)?;
            tracked(
                a.out.join(RUN_MANIFEST_FILE),
                "pretrain",
                cfg.to_json(),
                a.deterministic,
                &[&manifest_path, &config_path],
                |run| {
                    let outcome = pipeline::pretrain_run(&manifest, &cfg, &a.out)?;
                    if let Some(last) = outcome.history.last() {
                        info!("final loss {:.4}, embedding std {:.4}", last.loss_total, last.embedding_std);
                    }
                    run.add_output(a.out.join("checkpoint"));
                    run.add_output(a.out.join("losses.csv"));
                    Ok(())
                },
            )?;
        }
        Command::Finetune(a) => {
            let ssl = if a.ckpt == "scratch" {
                None
            } else {
                Some(pipeline::load_ssl(&resolve_input(Path::new(&a.ckpt)))?)
            };
            let mut cfg = match (&a.config, &ssl) {
                (Some(p), _) => parse_config(&resolve_input(p))?,
                (None, Some((_, meta))) => pipeline::config_from_meta(meta)?,
                (None, None) => ExperimentConfig::default().resolved(),
            };
            cfg.finetune.labeled_patients = a.labeled_patients;
            cfg.finetune.init = if ssl.is_some() { InitMode::SslCheckpoint } else { InitMode::Scratch };
            cfg.validate()?;
            let pool_path = resolve_input(&a.pool);
            let pool = pipeline::load_manifest(&pool_path)?;
            tracked(
                a.out.join(RUN_MANIFEST_FILE),
                "finetune",
                cfg.to_json(),
                a.deterministic,
                &[&pool_path],
                |run| {
                    let data = pipeline::finetune_data(&pool, &cfg, a.labeled_patients, a.seed)?;
                    let ckpt = a.out.join("checkpoint");
                    let outcome =
                        pipeline::finetune_run(ssl.as_ref().map(|s| &s.0), &data, &cfg, a.seed, Some(&ckpt))?;
                    let summary = serde_json::json!({
                        "best_epoch": outcome.best_epoch,
                        "val_accuracy": outcome.val_accuracy,
                        "train_loss": outcome.train_loss,
                        "labeled_patient_ids": data.train_ids,
                    });
                    let path = a.out.join("finetune.json");
                    std::fs::write(&path, serde_json::to_string_pretty(&summary)?)?;
                    run.add_output(ckpt);
                    run.add_output(path);
                    Ok(())
                },
            )?;
        }
        Command::Evaluate(a) => {
            if !(0.0..=1.0).contains(&a.sigma) {
                bail!("--sigma {} outside [0, 1]", a.sigma);
            }
            let test_path = resolve_input(&a.test);
            let test = pipeline::load_manifest(&test_path)?;
            let name = a.report.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let manifest_path = a.report.with_file_name(format!("{name}.{RUN_MANIFEST_FILE}"));
            let echo = serde_json::json!({ "ckpt": a.ckpt, "sigma": a.sigma });
            tracked(manifest_path, "evaluate", echo, true, &[&test_path], |run| {
                let report = pipeline::evaluate_run(&a.ckpt, &test, a.sigma)?;
                if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                write_report(&report, &a.report)?;
                info!("sen {:.3}, spe {:.3}, hm {:.3}", report.sen, report.spe, report.hm);
                run.add_output(&a.report);
                Ok(())
            })?;
        }
        Command::Sweep(a) => {
            let plan_path = resolve_input(&a.plan);
            let mut plan = ExperimentPlan::load(&plan_path)?;
            plan.pool_manifest = resolve_input(&plan.pool_manifest);
            plan.test_manifest = resolve_input(&plan.test_manifest);
            plan.ssl_checkpoint = plan.ssl_checkpoint.as_deref().map(resolve_input);
            let cfg = config_or_default(a.config.as_deref())?;
            let echo = serde_json::json!({ "plan": plan, "config": cfg.to_json() });
            let inputs = [plan_path.as_path(), plan.pool_manifest.as_path(), plan.test_manifest.as_path()];
            let failed = tracked(a.out.join(RUN_MANIFEST_FILE), "sweep", echo, a.deterministic, &inputs, |run| {
                let outcome = run_sweep(&plan, &cfg, &a.out)?;
                run.add_output(&outcome.summary);
                run.add_output(&outcome.plot_svg);
                run.add_output(&outcome.plot_png);
                Ok(outcome.failures.len())
            })?;
            if failed > 0 {
                log::error!("{failed} sweep cells failed; see failures.csv");
                return Ok(1);
            }
        }
        Command::Gradcheck(a) => {
            let report = pipeline::gradcheck_run(a.tolerance, a.coordinates, a.seed)?;
            println!(
                "checked {} coordinates: max relative error {:.3e} (tolerance {:.1e}); teacher max |grad| {}; convergence ratio {:.3}",
                report.checked, report.max_rel_error, report.tolerance, report.teacher_max_abs_grad, report.convergence_ratio
            );
            if let Some(path) = &a.report {
                std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
            }
            if !report.passed() {
                for w in &report.worst {
                    eprintln!("  {}[{}]: analytic {:.6e}, numeric {:.6e}, rel {:.3e}", w.name, w.index, w.analytic, w.numeric, w.rel_error);
                }
                return Ok(1);
            }
        }
    }
    Ok(0)
}
