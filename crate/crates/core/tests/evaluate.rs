use std::collections::HashSet;

use gxssl_core::augment::AugmentConfig;
use gxssl_core::checkpoint::RunMeta;
use gxssl_core::evaluate::finetune::{
    argmax_label, best_epoch_index, init_classifier, load_classifier, patch_accuracy, save_classifier,
};
use gxssl_core::evaluate::{
    build_finetune_sets, evaluate_cohort_with, finetune, predict_patches, FinetuneConfig, SplitPlan,
};
use gxssl_core::manifest::{check_disjoint, DatasetManifest, PatientEntry, Split};
use gxssl_core::nn::FeatureMap;
use gxssl_core::patcher::TilingSpec;
use gxssl_core::ssl::EncoderConfig;
use gxssl_core::synthgen::{generate_cohort_split, write_cohort, SynthConfig};
use gxssl_core::types::{GrayImage, PatchLabel, PatchRecord, PatientLabel};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        channels: vec![4, 8],
        ..EncoderConfig::small_conv()
    }
}

fn view_cfg() -> AugmentConfig {
    AugmentConfig::synthetic()
}

fn record(pixels: GrayImage, label: PatchLabel) -> PatchRecord {
    PatchRecord {
        patient_id: "p".into(),
        patient_label: PatientLabel::Negative,
        grid_x: 0,
        grid_y: 0,
        size: pixels.width(),
        label: Some(label),
        pixels,
    }
}

/// Balanced labels attached at random to patches from one distribution.
fn random_label_set(n_per_class: usize, seed: u64) -> Vec<PatchRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<PatchLabel> = PatchLabel::ALL.iter().flat_map(|&l| std::iter::repeat_n(l, n_per_class)).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .map(|l| {
            let px = (0..32 * 32).map(|_| rng.random::<f32>()).collect();
            record(GrayImage::new(32, 32, px, 16).unwrap(), l)
        })
        .collect()
}

fn pool_manifest(n: usize) -> DatasetManifest {
    let patients = (0..n)
        .map(|i| PatientEntry {
            patient_id: format!("p{i:03}"),
            patient_label: if i % 2 == 0 { PatientLabel::Negative } else { PatientLabel::Positive },
            image: format!("p{i:03}.png").into(),
            mask: None,
        })
        .collect();
    DatasetManifest::new(Split::SslTrain, patients, 0, "").unwrap()
}

#[test]
fn splits_are_stratified_disjoint_and_nested() {
    let pool = pool_manifest(200);
    let sets = build_finetune_sets(&pool, 3, &SplitPlan::default()).unwrap();
    assert_eq!(sets.val.patients.len(), 80);
    assert_eq!(sets.train.patients.len(), 120);
    assert_eq!(sets.val.count_label(PatientLabel::Positive), 40);
    check_disjoint(&[&sets.train, &sets.val]).unwrap();
    let mut prev: HashSet<String> = HashSet::new();
    for (&k, m) in &sets.fewshot {
        assert_eq!(m.patients.len(), k);
        assert_eq!(m.count_label(PatientLabel::Positive), k / 2);
        let ids: HashSet<String> = m.patients.iter().map(|p| p.patient_id.clone()).collect();
        assert!(prev.is_subset(&ids));
        assert!(ids.iter().all(|id| sets.train.patient_ids().contains(id.as_str())));
        prev = ids;
    }
    assert_eq!(sets.fewshot.keys().copied().collect::<Vec<_>>(), vec![10, 20, 30, 40]);
    let again = build_finetune_sets(&pool, 3, &SplitPlan::default()).unwrap();
    assert_eq!(again.val, sets.val);
    let other = build_finetune_sets(&pool, 4, &SplitPlan::default()).unwrap();
    assert_ne!(other.val, sets.val);
}

#[test]
fn pool_too_small_is_rejected() {
    assert!(build_finetune_sets(&pool_manifest(100), 0, &SplitPlan::default()).is_err());
}

#[test]
fn earliest_best_epoch_wins_ties() {
    let acc = [0.2, 0.5, 0.9, 0.4, 0.6, 0.8, 0.9, 0.1];
    assert_eq!(best_epoch_index(&acc), Some(2));
    assert_eq!(best_epoch_index(&[]), None);
}

#[test]
fn argmax_ties_go_to_lowest_class() {
    let logits = FeatureMap::<f32>::from_columns(3, 3, vec![1.0, 0.0, 0.0, 1.0, 2.0, 5.0, 0.5, 2.0, 5.0]);
    assert_eq!(argmax_label(&logits, 0), PatchLabel::O);
    assert_eq!(argmax_label(&logits, 1), PatchLabel::N);
    assert_eq!(argmax_label(&logits, 2), PatchLabel::N);
}

#[test]
fn zero_epochs_returns_initialisation_at_chance() {
    let val = random_label_set(100, 1);
    let train = random_label_set(4, 2);
    let cfg = FinetuneConfig {
        epochs: 0,
        ..FinetuneConfig::default()
    };
    let model = init_classifier(&tiny_encoder(), None, 5).unwrap();
    let out = finetune(model, &train, &val, &cfg, &view_cfg(), 5).unwrap();
    assert_eq!(out.best_epoch, 0);
    assert!(out.val_accuracy.is_empty());
    let mut m = out.model;
    let acc = patch_accuracy(&mut m, &val, &view_cfg()).unwrap();
    // Binomial(300, 1/3): 3σ ≈ 0.082.
    assert!((acc - 1.0 / 3.0).abs() < 0.082, "{acc}");
}

#[test]
fn empty_fewshot_set_is_rejected() {
    let model = init_classifier(&tiny_encoder(), None, 0).unwrap();
    let val = random_label_set(2, 3);
    assert!(finetune(model, &[], &val, &FinetuneConfig::default(), &view_cfg(), 0).is_err());
}

#[test]
fn finetune_fits_a_separable_toy_task() {
    // Class determined by brightness.
    let make = |seed: u64, n: usize| -> Vec<PatchRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let l = PatchLabel::ALL[i % 3];
                let base = 0.15 + 0.35 * l.index() as f32;
                let px = (0..32 * 32).map(|_| base + 0.1 * rng.random::<f32>()).collect();
                record(GrayImage::new(32, 32, px, 16).unwrap(), l)
            })
            .collect()
    };
    let (train, val) = (make(1, 60), make(2, 30));
    let cfg = FinetuneConfig {
        epochs: 15,
        batch_size: 16,
        learning_rate: 0.05,
        ..FinetuneConfig::default()
    };
    let model = init_classifier(&tiny_encoder(), None, 1).unwrap();
    let out = finetune(model, &train, &val, &cfg, &view_cfg(), 1).unwrap();
    let best = out.val_accuracy[out.best_epoch - 1];
    assert!(best >= 0.9, "{:?}", out.val_accuracy);
    assert_eq!(Some(out.best_epoch - 1), best_epoch_index(&out.val_accuracy));
    let mut m = out.model;
    assert_eq!(patch_accuracy(&mut m, &val, &view_cfg()).unwrap(), best);
}

#[test]
fn batch_and_single_predictions_agree() {
    let mut model = init_classifier(&tiny_encoder(), None, 7).unwrap();
    let patches = random_label_set(50, 9);
    let imgs: Vec<&GrayImage> = patches.iter().map(|p| &p.pixels).collect();
    let batched = predict_patches(&mut model, &imgs, &view_cfg()).unwrap();
    let single: Vec<PatchLabel> = imgs
        .iter()
        .map(|p| predict_patches(&mut model, &[*p], &view_cfg()).unwrap()[0])
        .collect();
    assert_eq!(batched, single);
    let dup = predict_patches(&mut model, &[imgs[3], imgs[3]], &view_cfg()).unwrap();
    assert_eq!(dup[0], dup[1]);
}

#[test]
fn saved_classifier_predicts_identically() {
    let mut model = init_classifier(&tiny_encoder(), None, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_classifier(&model, &RunMeta::default(), &dir.path().join("ck")).unwrap();
    let (mut back, _) = load_classifier(&dir.path().join("ck"), &tiny_encoder()).unwrap();
    let patches = random_label_set(10, 12);
    let imgs: Vec<&GrayImage> = patches.iter().map(|p| &p.pixels).collect();
    assert_eq!(
        predict_patches(&mut model, &imgs, &view_cfg()).unwrap(),
        predict_patches(&mut back, &imgs, &view_cfg()).unwrap()
    );
}

fn test_cohort(dir: &std::path::Path) -> DatasetManifest {
    let cfg = SynthConfig {
        image_size: 128,
        seed: 5,
        ..SynthConfig::default()
    };
    let (patients, manifest) = generate_cohort_split(&cfg, 6, Split::Test).unwrap();
    DatasetManifest::load(&write_cohort(&patients, &manifest, dir).unwrap()).unwrap()
}

#[test]
fn always_outside_model_calls_everyone_negative() {
    let dir = tempfile::tempdir().unwrap();
    let test = test_cohort(dir.path());
    let r = evaluate_cohort_with(&test, &TilingSpec::synthetic(), 0.5, |p| Ok(vec![PatchLabel::O; p.len()])).unwrap();
    assert_eq!((r.tp, r.fp, r.tn, r.fn_), (0, 0, 3, 3));
    assert_eq!((r.sen, r.spe, r.hm), (0.0, 1.0, 0.0));
    assert!(r.per_patient.iter().all(|p| p.ratio.is_none()));
    assert_eq!(r.per_patient[0].count_o, 9);
}

#[test]
fn oracle_model_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let test = test_cohort(dir.path());
    let mut labels = test.patients.iter().map(|p| p.patient_label);
    let r = evaluate_cohort_with(&test, &TilingSpec::synthetic(), 0.5, |p| {
        let l = labels.next().unwrap();
        Ok(vec![PatchLabel::inside(l); p.len()])
    })
    .unwrap();
    assert_eq!((r.sen, r.spe, r.hm), (1.0, 1.0, 1.0));
}
