//! The work behind each subcommand, callable in-process.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gxssl_core::checkpoint::{load_checkpoint, RunMeta};
use gxssl_core::evaluate::finetune::{finetune_meta, init_classifier, load_classifier, save_classifier};
use gxssl_core::evaluate::{build_finetune_sets, evaluate_cohort, finetune, FinetuneOutcome, InitMode, MetricsReport, SplitPlan};
use gxssl_core::manifest::{DatasetManifest, Split};
use gxssl_core::nn::ParamSet;
use gxssl_core::patcher::{index_manifest, load_manifest_patches, write_crop_pngs, write_packed};
use gxssl_core::ssl::gradcheck::{gradient_check, GradcheckConfig, GradcheckReport};
use gxssl_core::ssl::pretrain::{pretrain, ssl_inputs, PretrainOutcome, PretrainSetup, CHECKPOINT_DIR};
use gxssl_core::synthgen::{generate_cohort_split, write_cohort, SynthConfig};
use gxssl_core::types::PatchRecord;
use log::info;

use crate::config::ExperimentConfig;

pub const DATA_DIR_ENV: &str = "GXSSL_DATA_DIR";

/// Relative input paths that do not exist as given are looked up under
/// `$GXSSL_DATA_DIR`.
pub fn resolve_input(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(root) = std::env::var_os(DATA_DIR_ENV) {
            return Path::new(&root).join(path);
        }
    }
    path.to_path_buf()
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

/// Accepts either a checkpoint archive or a run directory holding one in
/// `checkpoint/`.
pub fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join(CHECKPOINT_DIR);
    if !path.join(gxssl_core::checkpoint::PARAMS_FILE).exists() && nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// The experiment config echoed into a checkpoint by this tool.
pub fn config_from_meta(meta: &RunMeta) -> Result<ExperimentConfig> {
    serde_json::from_value(meta.config.clone()).context("checkpoint does not carry an experiment config")
}

pub fn synth(cfg: &SynthConfig, patients: usize, split: Split, out: &Path) -> Result<PathBuf> {
    let (cohort, manifest) = generate_cohort_split(cfg, patients, split)?;
    let path = write_cohort(&cohort, &manifest, out)?;
    info!("wrote {patients} synthetic patients to {}", out.display());
    Ok(path)
}

pub struct PatchOutput {
    pub manifest: PathBuf,
    pub records: Vec<PatchRecord>,
}

/// Tiles a manifest; writes `manifest.json` with the patch index plus the
/// crops (PNG files under `crops/`, or `crops.bin` when `packed`).
pub fn patch(manifest: &DatasetManifest, cfg: &ExperimentConfig, out: &Path, packed: bool) -> Result<PatchOutput> {
    let (indexed, records) = index_manifest(manifest, &cfg.tiling)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("manifest.json");
    indexed.save(&path)?;
    if packed {
        write_packed(&records, out)?;
    } else {
        write_crop_pngs(&records, &out.join("crops"))?;
    }
    Ok(PatchOutput { manifest: path, records })
}

pub fn pretrain_run(manifest: &DatasetManifest, cfg: &ExperimentConfig, out: &Path) -> Result<PretrainOutcome> {
    let patches = load_manifest_patches(manifest, &cfg.tiling)?;
    info!("pretraining on {} patches", patches.len());
    let inputs = ssl_inputs(&patches);
    drop(patches);
    let setup = PretrainSetup {
        encoder: &cfg.encoder,
        mlp: &cfg.mlp,
        augment: &cfg.augment,
        hyper: &cfg.hyper,
        seed: cfg.seed,
        config_echo: cfg.to_json(),
    };
    Ok(pretrain(&inputs, &setup, Some(out))?)
}

/// Loads SSL parameters and the config they were trained with.
pub fn load_ssl(path: &Path) -> Result<(ParamSet, RunMeta)> {
    let dir = checkpoint_dir(path);
    load_checkpoint(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

/// Patches for fine-tuning: the few-shot set for `labeled` patients and the
/// validation set, both drawn from `pool` with `seed`.
pub struct FinetuneData {
    pub train: Vec<PatchRecord>,
    pub val: Vec<PatchRecord>,
    pub train_ids: Vec<String>,
}

pub fn finetune_data(pool: &DatasetManifest, cfg: &ExperimentConfig, labeled: usize, seed: u64) -> Result<FinetuneData> {
    let plan = SplitPlan {
        fewshot_grid: vec![labeled],
        ..SplitPlan::default()
    };
    let sets = build_finetune_sets(pool, seed, &plan)?;
    let few = &sets.fewshot[&labeled];
    Ok(FinetuneData {
        train: load_manifest_patches(few, &cfg.tiling)?,
        val: load_manifest_patches(&sets.val, &cfg.tiling)?,
        train_ids: few.patients.iter().map(|p| p.patient_id.clone()).collect(),
    })
}

/// Fine-tunes and, when `out` is given, saves the classifier archive there.
pub fn finetune_run(
    ssl: Option<&ParamSet>,
    data: &FinetuneData,
    cfg: &ExperimentConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<FinetuneOutcome> {
    if ssl.is_some() != (cfg.finetune.init == InitMode::SslCheckpoint) {
        bail!("finetune.init = {} does not match the given checkpoint", cfg.finetune.init.as_str());
    }
    let model = init_classifier(&cfg.encoder, ssl, seed)?;
    let outcome = finetune(model, &data.train, &data.val, &cfg.finetune, &cfg.augment, seed)?;
    if let Some(dir) = out {
        save_classifier(&outcome.model, &finetune_meta(cfg.to_json(), &outcome, seed), dir)?;
    }
    Ok(outcome)
}

pub fn evaluate_run(ckpt: &Path, test: &DatasetManifest, sigma: f64) -> Result<MetricsReport> {
    let dir = checkpoint_dir(ckpt);
    let meta = gxssl_core::checkpoint::load_meta(&dir)?;
    let cfg = config_from_meta(&meta)?;
    let (mut model, _) = load_classifier(&dir, &cfg.encoder)?;
    Ok(evaluate_cohort(&mut model, test, &cfg.tiling, sigma, &cfg.augment)?)
}

pub fn gradcheck_run(tolerance: f64, coordinates: usize, seed: u64) -> Result<GradcheckReport> {
    Ok(gradient_check(&GradcheckConfig {
        tolerance,
        coordinates,
        seed,
        ..GradcheckConfig::default()
    })?)
}
