//! The few-shot grid: for every (seed, labelled-patient count, init mode)
//! fine-tune, evaluate and collect Sen/Spe/HM.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gxssl_core::evaluate::{evaluate_cohort, write_report, InitMode};
use gxssl_core::manifest::DatasetManifest;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::pipeline::{finetune_data, finetune_run, load_ssl};
use crate::plot::{write_hm_curve, Series};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const FAILURES_FILE: &str = "failures.csv";

fn default_grid() -> Vec<usize> {
    vec![10, 20, 30, 40]
}

fn default_inits() -> Vec<InitMode> {
    vec![InitMode::SslCheckpoint, InitMode::Scratch]
}

fn default_sigma() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    #[serde(default)]
    pub name: String,
    pub seeds: Vec<u64>,
    #[serde(default = "default_grid")]
    pub fewshot_grid: Vec<usize>,
    #[serde(default = "default_inits")]
    pub inits: Vec<InitMode>,
    pub pool_manifest: PathBuf,
    pub test_manifest: PathBuf,
    #[serde(default)]
    pub ssl_checkpoint: Option<PathBuf>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("plan has an empty seed list");
        }
        if self.fewshot_grid.is_empty() || self.inits.is_empty() {
            bail!("plan needs at least one grid value and one init mode");
        }
        if let Some(k) = self.fewshot_grid.iter().find(|&&k| k == 0 || k % 2 != 0) {
            bail!("grid value {k} must be positive and even");
        }
        if self.inits.contains(&InitMode::SslCheckpoint) && self.ssl_checkpoint.is_none() {
            bail!("plan includes ssl_checkpoint init but names no checkpoint");
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            bail!("sigma {} outside [0, 1]", self.sigma);
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let plan: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| anyhow::anyhow!("plan key `{}`: {}", e.path(), e.inner()))?;
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub labeled_patients: usize,
    pub init: String,
    pub sen: f64,
    pub spe: f64,
    pub hm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailedCell {
    pub seed: u64,
    pub labeled_patients: usize,
    pub init: String,
    pub error: String,
}

pub struct SweepOutcome {
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<FailedCell>,
    pub summary: PathBuf,
    pub plot_svg: PathBuf,
    pub plot_png: PathBuf,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}

/// Median HM per init mode and grid value.
pub fn median_hm(rows: &[SummaryRow]) -> BTreeMap<String, BTreeMap<usize, f64>> {
    let mut groups: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.init.clone()).or_default().entry(r.labeled_patients).or_default().push(r.hm);
    }
    groups
        .into_iter()
        .map(|(init, by_k)| (init, by_k.into_iter().map(|(k, mut v)| (k, median(&mut v))).collect()))
        .collect()
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<SummaryRow>, _>>()?)
}

pub fn run_sweep(plan: &ExperimentPlan, cfg: &ExperimentConfig, out: &Path) -> Result<SweepOutcome> {
    plan.validate()?;
    let pool = DatasetManifest::load(&plan.pool_manifest)
        .with_context(|| format!("loading pool {}", plan.pool_manifest.display()))?;
    let test = DatasetManifest::load(&plan.test_manifest)
        .with_context(|| format!("loading test set {}", plan.test_manifest.display()))?;
    let ssl = match &plan.ssl_checkpoint {
        Some(p) if plan.inits.contains(&InitMode::SslCheckpoint) => Some(load_ssl(p)?.0),
        _ => None,
    };
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &seed in &plan.seeds {
        for &k in &plan.fewshot_grid {
            let data = finetune_data(&pool, cfg, k, seed);
            for &init in &plan.inits {
                let cell_dir = out.join("cells").join(format!("s{seed}_k{k}_{}", init.as_str()));
                let result = data.as_ref().map_err(|e| anyhow::anyhow!("{e:#}")).and_then(|data| {
                    let mut cell_cfg = cfg.clone();
                    cell_cfg.finetune.labeled_patients = k;
                    cell_cfg.finetune.init = init;
                    let params = if init == InitMode::SslCheckpoint { ssl.as_ref() } else { None };
                    let mut outcome = finetune_run(params, data, &cell_cfg, seed, Some(&cell_dir.join("checkpoint")))?;
                    let report = evaluate_cohort(&mut outcome.model, &test, &cell_cfg.tiling, plan.sigma, &cell_cfg.augment)?;
                    write_report(&report, &cell_dir.join("report.json"))?;
                    Ok(report)
                });
                match result {
                    Ok(r) => {
                        info!("seed {seed}, {k} patients, {}: hm {:.3}", init.as_str(), r.hm);
                        rows.push(SummaryRow {
                            seed,
                            labeled_patients: k,
                            init: init.as_str().to_string(),
                            sen: r.sen,
                            spe: r.spe,
                            hm: r.hm,
                        });
                    }
                    Err(e) => {
                        warn!("cell seed {seed}, {k} patients, {} failed: {e:#}", init.as_str());
                        failures.push(FailedCell {
                            seed,
                            labeled_patients: k,
                            init: init.as_str().to_string(),
                            error: format!("{e:#}"),
                        });
                    }
                }
            }
        }
    }

    let summary = out.join(SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&summary)?;
    if rows.is_empty() {
        w.write_record(["seed", "labeled_patients", "init", "sen", "spe", "hm"])?;
    }
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    if !failures.is_empty() {
        let mut w = csv::Writer::from_path(out.join(FAILURES_FILE))?;
        for f in &failures {
            w.serialize(f)?;
        }
        w.flush()?;
    }

    let series: Vec<Series> = median_hm(&rows)
        .into_iter()
        .map(|(name, by_k)| Series {
            name,
            points: by_k.into_iter().map(|(k, v)| (k as f64, v)).collect(),
        })
        .collect();
    let plot_svg = out.join("sweep").join("hm_curve.svg");
    let plot_png = out.join("sweep").join("hm_curve.png");
    let title = if plan.name.is_empty() { "median HM".to_string() } else { plan.name.clone() };
    write_hm_curve(&series, &title, &plot_svg, &plot_png)?;
    Ok(SweepOutcome {
        rows,
        failures,
        summary,
        plot_svg,
        plot_png,
    })
}
