//! Supervised fine-tuning of the student encoder with a linear 3-class
//! head, and patch prediction.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{eval_view, flip_view, AugmentConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint, RngState, RunMeta};
use crate::nn::{FeatureMap, Linear, LinearCache, Module, NormMode, Param, ParamInit, ParamSet, Scalar};
use crate::rng::{derive_seed, rng_for, stream};
use crate::ssl::encoder::{Encoder, EncoderCache};
use crate::ssl::network::STUDENT_ENCODER;
use crate::ssl::{EncoderConfig, Sgd};
use crate::types::{GrayImage, PatchLabel, PatchRecord};
use crate::{Error, Result};

pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    SslCheckpoint,
    Scratch,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::SslCheckpoint => "ssl_checkpoint",
            InitMode::Scratch => "scratch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub labeled_patients: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub init: InitMode,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            labeled_patients: 10,
            epochs: 40,
            learning_rate: 0.003,
            momentum: 0.9,
            weight_decay: 0.0004,
            batch_size: 64,
            init: InitMode::SslCheckpoint,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labeled_patients == 0 || self.labeled_patients % 2 != 0 {
            return Err(Error::validation(format!(
                "labeled_patients {} must be even and positive",
                self.labeled_patients
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::validation("momentum must be in [0, 1) and weight_decay >= 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::validation(format!("batch_size {} < 2", self.batch_size)));
        }
        Ok(())
    }
}

/// Encoder `f_θ` plus a linear head to the three patch classes.
#[derive(Debug, Clone)]
pub struct Classifier<F> {
    pub encoder: Encoder<F>,
    pub head: Linear<F>,
}

pub struct ClassifierCache<F> {
    encoder: EncoderCache<F>,
    head: LinearCache<F>,
}

impl<F: Scalar> Classifier<F> {
    pub fn new(cfg: &EncoderConfig, init: &mut ParamInit) -> Self {
        let encoder = Encoder::new(cfg, init);
        let head = Linear::new(cfg.feature_dim(), PatchLabel::ALL.len(), init);
        Self { encoder, head }
    }

    /// Logits `[3][n]`.
    pub fn forward(&mut self, x: &FeatureMap<F>, mode: NormMode) -> (FeatureMap<F>, ClassifierCache<F>) {
        let (h, encoder) = self.encoder.forward(x, mode);
        let (logits, head) = self.head.forward(&h);
        (logits, ClassifierCache { encoder, head })
    }

    pub fn backward(&mut self, cache: &ClassifierCache<F>, dlogits: &FeatureMap<F>) {
        let dh = self.head.backward(&cache.head, dlogits, true).expect("dx requested");
        self.encoder.backward(&cache.encoder, &dh);
    }
}

impl<F: Scalar> Module<F> for Classifier<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<F>)) {
        self.encoder.visit(&format!("{prefix}{STUDENT_ENCODER}"), f);
        self.head.visit(&format!("{prefix}{HEAD_PREFIX}"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.encoder.visit_mut(&format!("{prefix}{STUDENT_ENCODER}"), f);
        self.head.visit_mut(&format!("{prefix}{HEAD_PREFIX}"), f);
    }
}

/// Mean softmax cross-entropy over columns and its gradient.
pub fn cross_entropy<F: Scalar>(logits: &FeatureMap<F>, targets: &[usize]) -> (f64, FeatureMap<F>) {
    let (k, n) = (logits.c, logits.n);
    assert_eq!(targets.len(), n, "one target per column");
    let mut grad = FeatureMap::zeros(k, n, 1, 1);
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let col: Vec<f64> = (0..k).map(|c| logits.data[c * n + i].as_f64()).collect();
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = col.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + max - col[t];
        for c in 0..k {
            let p = exps[c] / sum;
            let g = (p - if c == t { 1.0 } else { 0.0 }) / n as f64;
            grad.data[c * n + i] = F::lit(g);
        }
    }
    (loss / n as f64, grad)
}

/// Argmax with ties going to the lowest index (O before N before P).
pub fn argmax_label<F: Scalar>(logits: &FeatureMap<F>, column: usize) -> PatchLabel {
    let n = logits.n;
    let mut best = 0;
    for c in 1..logits.c {
        if logits.data[c * n + column] > logits.data[best * n + column] {
            best = c;
        }
    }
    PatchLabel::from_index(best).expect("three classes")
}

fn stack<F: Scalar>(views: Vec<Vec<f32>>, side: usize) -> FeatureMap<F> {
    let n = views.len();
    let data = views.into_iter().flatten().map(|v| F::lit(v as f64)).collect();
    FeatureMap::from_vec(1, n, side, side, data)
}

const PREDICT_BATCH: usize = 128;

/// Deterministic evaluation-mode predictions; batch composition does not
/// affect results.
pub fn predict_patches<F: Scalar>(
    model: &mut Classifier<F>,
    patches: &[&GrayImage],
    augment: &AugmentConfig,
) -> Result<Vec<PatchLabel>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(PREDICT_BATCH) {
        let views = chunk.iter().map(|p| eval_view(p, augment)).collect::<Result<Vec<_>>>()?;
        let (logits, _) = model.forward(&stack(views, augment.view_size), NormMode::Eval);
        if !logits.all_finite() {
            return Err(Error::Numeric {
                layer: "head".into(),
                detail: "non-finite logits".into(),
            });
        }
        out.extend((0..logits.n).map(|i| argmax_label(&logits, i)));
    }
    Ok(out)
}

pub fn patch_accuracy<F: Scalar>(model: &mut Classifier<F>, patches: &[PatchRecord], augment: &AugmentConfig) -> Result<f64> {
    let labelled: Vec<&PatchRecord> = patches.iter().filter(|p| p.label.is_some()).collect();
    if labelled.is_empty() {
        return Err(Error::validation("no labelled validation patches"));
    }
    let images: Vec<&GrayImage> = labelled.iter().map(|p| &p.pixels).collect();
    let preds = predict_patches(model, &images, augment)?;
    let correct = preds.iter().zip(&labelled).filter(|(p, r)| Some(**p) == r.label).count();
    Ok(correct as f64 / labelled.len() as f64)
}

pub struct FinetuneOutcome {
    pub model: Classifier<f32>,
    /// 1-based epoch of the returned model; 0 when no epoch ran.
    pub best_epoch: usize,
    pub val_accuracy: Vec<f64>,
    pub train_loss: Vec<f64>,
}

/// Index of the first maximum.
pub fn best_epoch_index(history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in history.iter().enumerate() {
        if best.is_none_or(|b| v > history[b]) {
            best = Some(i);
        }
    }
    best
}

/// Builds the classifier: encoder from `ssl_params` (`f_theta.*`) or random
/// for scratch; head always random.
pub fn init_classifier(encoder: &EncoderConfig, ssl_params: Option<&ParamSet>, seed: u64) -> Result<Classifier<f32>> {
    let mut init = ParamInit::new(rng_for(seed, &[stream::FINETUNE, 0]));
    let mut model = Classifier::new(&encoder.resolved(), &mut init);
    if let Some(set) = ssl_params {
        model.encoder.import(STUDENT_ENCODER, set)?;
    }
    Ok(model)
}

/// Full fine-tune with cross-entropy and flip-only augmentation; the model
/// of the epoch with the highest validation patch accuracy is returned
/// (earliest epoch on ties).
pub fn finetune(
    mut model: Classifier<f32>,
    train: &[PatchRecord],
    val: &[PatchRecord],
    cfg: &FinetuneConfig,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let train: Vec<&PatchRecord> = train.iter().filter(|p| p.label.is_some()).collect();
    if train.is_empty() {
        return Err(Error::validation("few-shot set has no labelled patches"));
    }
    let mut opt = Sgd::<f32>::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut best = model.clone();
    let mut val_accuracy = Vec::new();
    let mut train_loss = Vec::new();
    let mut best_epoch = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(seed, &[stream::FINETUNE, 1, epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let mut views = Vec::with_capacity(idx.len());
            for (j, &i) in idx.iter().enumerate() {
                let pos = (b * cfg.batch_size + j) as u64;
                let mut rng = rng_for(derive_seed(seed, &[stream::FINETUNE, 2, epoch as u64]), &[pos]);
                views.push(flip_view(&train[i].pixels, &mut rng, augment)?);
            }
            let targets: Vec<usize> = idx.iter().map(|&i| train[i].label.expect("filtered").index()).collect();
            model.zero_grad();
            let (logits, cache) = model.forward(&stack(views, augment.view_size), NormMode::Train);
            let (loss, grad) = cross_entropy(&logits, &targets);
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    layer: "cross_entropy".into(),
                    detail: format!("loss {loss} at epoch {}", epoch + 1),
                });
            }
            model.backward(&cache, &grad);
            opt.step(&mut model)?;
            epoch_loss += loss;
            batches += 1;
        }
        let acc = patch_accuracy(&mut model, val, augment)?;
        let mean_loss = epoch_loss / batches.max(1) as f64;
        info!("fine-tune epoch {}/{}: loss {mean_loss:.4}, val accuracy {acc:.4}", epoch + 1, cfg.epochs);
        if val_accuracy.iter().all(|&a| acc > a) {
            best = model.clone();
            best_epoch = epoch + 1;
        }
        val_accuracy.push(acc);
        train_loss.push(mean_loss);
    }
    Ok(FinetuneOutcome {
        model: best,
        best_epoch,
        val_accuracy,
        train_loss,
    })
}

/// Saves the classifier (`f_theta.*`, `head.*`); `meta.config` should echo
/// the encoder config so [`load_classifier`] can rebuild the network.
pub fn save_classifier(model: &Classifier<f32>, meta: &RunMeta, dir: &Path) -> Result<()> {
    let mut set = ParamSet::new();
    model.export("", &mut set)?;
    save_checkpoint(&set, meta, dir)
}

pub fn load_classifier(dir: &Path, encoder: &EncoderConfig) -> Result<(Classifier<f32>, RunMeta)> {
    let (set, meta) = load_checkpoint(dir)?;
    let mut model = init_classifier(encoder, None, 0)?;
    model.import("", &set)?;
    Ok((model, meta))
}

pub fn finetune_meta(config: serde_json::Value, outcome: &FinetuneOutcome, seed: u64) -> RunMeta {
    RunMeta {
        config,
        epoch: outcome.best_epoch,
        loss_history: outcome.train_loss.clone(),
        val_accuracy_history: outcome.val_accuracy.clone(),
        rng_state: RngState {
            seed,
            next_epoch: outcome.val_accuracy.len() as u64,
        },
    }
}
