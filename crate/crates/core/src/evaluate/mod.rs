//! Few-label fine-tuning, patient-level decisions and cohort metrics.

pub mod finetune;
pub mod metrics;
pub mod splits;

use std::path::Path;

use crate::augment::AugmentConfig;
use crate::image_io::load_gray_image;
use crate::manifest::DatasetManifest;
use crate::patcher::{extract_test_patches, TilingSpec};
use crate::types::{GrayImage, PatchLabel};
use crate::Result;

pub use finetune::{finetune, predict_patches, Classifier, FinetuneConfig, FinetuneOutcome, InitMode};
pub use metrics::{classify_patient, compute_metrics, harmonic_mean, MetricsReport, PatientPrediction};
pub use splits::{build_finetune_sets, FinetuneSets, SplitPlan};

/// Tiles every test patient, predicts every tile and scores the cohort.
/// `predict` maps a batch of patches to labels.
pub fn evaluate_cohort_with(
    test: &DatasetManifest,
    tiling: &TilingSpec,
    sigma: f64,
    mut predict: impl FnMut(&[&GrayImage]) -> Result<Vec<PatchLabel>>,
) -> Result<MetricsReport> {
    let mut patients = Vec::with_capacity(test.patients.len());
    for entry in &test.patients {
        let image = load_gray_image(&entry.image)?;
        let patches = extract_test_patches(&entry.patient_id, &image, entry.patient_label, tiling)?;
        let refs: Vec<&GrayImage> = patches.iter().map(|p| &p.pixels).collect();
        let preds = predict(&refs)?;
        patients.push((entry.patient_id.clone(), entry.patient_label, preds));
    }
    metrics::score_patients(&patients, sigma)
}

pub fn evaluate_cohort(
    model: &mut Classifier<f32>,
    test: &DatasetManifest,
    tiling: &TilingSpec,
    sigma: f64,
    augment: &AugmentConfig,
) -> Result<MetricsReport> {
    evaluate_cohort_with(test, tiling, sigma, |patches| predict_patches(model, patches, augment))
}

pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text).map_err(|e| crate::Error::io(path, e))
}
