//! The self-supervised training loop.

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, MlpConfig, SslHyperparams};
use super::ema::ema_update;
use super::loss::{batch_cross_model, batch_cross_view, BatchLoss};
use super::network::{Student, Teacher};
use super::optim::Sgd;
use crate::augment::{make_views, AugmentConfig};
use crate::checkpoint::{save_checkpoint, RngState, RunMeta};
use crate::nn::{FeatureMap, Module, NormMode, ParamInit, ParamSet, Scalar};
use crate::rng::{derive_seed, rng_for, stream};
use crate::types::{GrayImage, PatchRecord};
use crate::{Error, Result};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSSES_FILE: &str = "losses.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SslStepReport {
    pub step: usize,
    pub loss_cross_view: f64,
    pub loss_cross_model: f64,
    pub loss_total: f64,
    /// Mean over dimensions of the batch standard deviation of `q̂1`.
    pub embedding_std: f64,
}

/// Student, teacher and optimizer state of one pretraining run.
pub struct SslModel<F> {
    pub student: Student<F>,
    pub teacher: Teacher<F>,
    pub optimizer: Sgd<F>,
    pub hyper: SslHyperparams,
    pub step: usize,
}

/// Mean per-dimension standard deviation of the L2-normalized columns.
pub fn embedding_std<F: Scalar>(q: &FeatureMap<F>) -> f64 {
    let (d, n) = (q.c, q.n);
    if n == 0 || d == 0 {
        return 0.0;
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| (0..d).map(|k| q.data[k * n + i].as_f64().powi(2)).sum::<f64>().sqrt() + super::loss::NORM_EPS)
        .collect();
    let mut total = 0.0;
    for k in 0..d {
        let row: Vec<f64> = (0..n).map(|i| q.data[k * n + i].as_f64() / norms[i]).collect();
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    total / d as f64
}

fn add_into<F: Scalar>(dst: &mut FeatureMap<F>, src: &FeatureMap<F>, scale: F) {
    for (a, &b) in dst.data.iter_mut().zip(&src.data) {
        *a += b * scale;
    }
}

impl<F: Scalar> SslModel<F> {
    /// Randomly initialized student; teacher starts as its exact copy.
    pub fn new(encoder: &EncoderConfig, mlp: &MlpConfig, hyper: &SslHyperparams, seed: u64) -> Result<Self> {
        encoder.validate()?;
        mlp.validate()?;
        hyper.validate()?;
        let mut init = ParamInit::new(rng_for(seed, &[stream::INIT]));
        let student = Student::new(&encoder.resolved(), mlp, &mut init);
        let teacher = Teacher::from_student(&student);
        Ok(Self {
            student,
            teacher,
            optimizer: Sgd::from_hyper(hyper),
            hyper: hyper.clone(),
            step: 0,
        })
    }

    /// Forward and backward for one batch of view pairs: leaves the loss
    /// gradient in the student's `grad` fields and touches nothing else
    /// besides batch-norm running statistics (in `Train` mode).
    pub fn forward_backward(&mut self, v1: &FeatureMap<F>, v2: &FeatureMap<F>, mode: NormMode) -> Result<SslStepReport> {
        if v1.n == 0 {
            return Err(Error::validation("empty batch"));
        }
        if (v1.c, v1.n, v1.h, v1.w) != (v2.c, v2.n, v2.h, v2.w) {
            return Err(Error::validation("view batches differ in shape"));
        }
        self.student.zero_grad();
        let (q1, c1) = self.student.forward(v1, mode)?;
        let (q2, c2) = self.student.forward(v2, mode)?;
        let z2 = self.teacher.forward_with_mode(v2, mode)?;
        let cv = batch_cross_view(&q1, &q2);
        let mut g1 = cv.grad_a;
        let mut g2 = cv.grad_b.expect("cross-view grads both sides");
        let cm_mean = if self.hyper.symmetrize {
            let z1 = self.teacher.forward_with_mode(v1, mode)?;
            let half = F::lit(0.5);
            let a: BatchLoss<F> = batch_cross_model(&q2, &z2);
            let b: BatchLoss<F> = batch_cross_model(&q1, &z1);
            add_into(&mut g2, &a.grad_a, half);
            add_into(&mut g1, &b.grad_a, half);
            (a.mean + b.mean) * half
        } else {
            let a = batch_cross_model(&q2, &z2);
            add_into(&mut g2, &a.grad_a, F::one());
            a.mean
        };
        let (lv, lm) = (cv.mean.as_f64(), cm_mean.as_f64());
        if !(lv.is_finite() && lm.is_finite()) {
            return Err(Error::Numeric {
                layer: "loss".into(),
                detail: format!("cross-view {lv}, cross-model {lm} at step {}", self.step),
            });
        }
        self.student.backward(&c1, &g1);
        self.student.backward(&c2, &g2);
        Ok(SslStepReport {
            step: self.step,
            loss_cross_view: lv,
            loss_cross_model: lm,
            loss_total: lv + lm,
            embedding_std: embedding_std(&q1),
        })
    }

    /// Loss only; batch statistics are used but running statistics stay put.
    pub fn loss(&mut self, v1: &FeatureMap<F>, v2: &FeatureMap<F>) -> Result<f64> {
        let (q1, _) = self.student.forward(v1, NormMode::BatchStats)?;
        let (q2, _) = self.student.forward(v2, NormMode::BatchStats)?;
        let z2 = self.teacher.forward(v2)?;
        let cv = batch_cross_view(&q1, &q2).mean;
        let cm = if self.hyper.symmetrize {
            let z1 = self.teacher.forward(v1)?;
            (batch_cross_model(&q2, &z2).mean + batch_cross_model(&q1, &z1).mean) * F::lit(0.5)
        } else {
            batch_cross_model(&q2, &z2).mean
        };
        Ok(cv.as_f64() + cm.as_f64())
    }

    /// One full iteration: gradient, student SGD step, then teacher EMA
    /// toward the updated student.
    pub fn train_step(&mut self, v1: &FeatureMap<F>, v2: &FeatureMap<F>) -> Result<SslStepReport> {
        let report = self.forward_backward(v1, v2, NormMode::Train)?;
        self.optimizer.step(&mut self.student)?;
        teacher_ema(&mut self.teacher, &self.student, F::lit(self.hyper.tau))?;
        self.step += 1;
        Ok(report)
    }

    /// Student (`f_theta.`, `g_theta.`, `p_theta.`) and teacher (`f_psi.`,
    /// `g_psi.`) parameters, in that order.
    pub fn export(&self) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        self.student.export("", &mut set)?;
        self.teacher.export("", &mut set)?;
        Ok(set)
    }

    pub fn import(&mut self, set: &ParamSet) -> Result<()> {
        self.student.import("", set)?;
        self.teacher.import("", set)
    }
}

/// `ψ ← τψ + (1−τ)θ′` over the encoder and projector; the predictor has no
/// teacher counterpart.
pub fn teacher_ema<F: Scalar>(teacher: &mut Teacher<F>, student: &Student<F>, tau: F) -> Result<()> {
    ema_update(&mut teacher.encoder, &student.encoder, tau)?;
    ema_update(&mut teacher.projector, &student.projector, tau)
}

/// Drops everything but the pixels, so labels cannot influence training.
pub fn ssl_inputs(records: &[PatchRecord]) -> Vec<GrayImage> {
    records.iter().map(|r| r.pixels.clone()).collect()
}

/// Batches of positions into the epoch permutation. A trailing partial batch
/// is dropped unless the whole set is smaller than one batch.
pub fn epoch_batches(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    if n < batch_size {
        return if n >= 2 { vec![0..n] } else { Vec::new() };
    }
    (0..n / batch_size).map(|b| b * batch_size..(b + 1) * batch_size).collect()
}

pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[stream::SHUFFLE, epoch as u64]));
    order
}

pub fn view_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    derive_seed(seed, &[stream::VIEWS, epoch as u64, position as u64])
}

/// Builds the two view batches for `positions` of the epoch order.
pub fn view_batch<F: Scalar>(
    patches: &[GrayImage],
    order: &[usize],
    positions: std::ops::Range<usize>,
    seed: u64,
    epoch: usize,
    augment: &AugmentConfig,
) -> Result<(FeatureMap<F>, FeatureMap<F>)> {
    let v = augment.view_size;
    let n = positions.len();
    let mut d1 = Vec::with_capacity(n * v * v);
    let mut d2 = Vec::with_capacity(n * v * v);
    for pos in positions {
        let pair = make_views(&patches[order[pos]], view_seed(seed, epoch, pos), augment)?;
        d1.extend(pair.v1.iter().map(|&x| F::lit(x as f64)));
        d2.extend(pair.v2.iter().map(|&x| F::lit(x as f64)));
    }
    Ok((FeatureMap::from_vec(1, n, v, v, d1), FeatureMap::from_vec(1, n, v, v, d2)))
}

pub struct PretrainSetup<'a> {
    pub encoder: &'a EncoderConfig,
    pub mlp: &'a MlpConfig,
    pub augment: &'a AugmentConfig,
    pub hyper: &'a SslHyperparams,
    pub seed: u64,
    /// Echoed into the checkpoint manifest.
    pub config_echo: serde_json::Value,
}

pub struct PretrainOutcome {
    pub model: SslModel<f32>,
    pub history: Vec<SslStepReport>,
    pub epoch_losses: Vec<f64>,
}

/// Runs `hyper.epochs` epochs over `patches`. When `out` is given, writes
/// `out/losses.csv` and the checkpoint archive `out/checkpoint`.
pub fn pretrain(patches: &[GrayImage], setup: &PretrainSetup, out: Option<&Path>) -> Result<PretrainOutcome> {
    setup.augment.validate()?;
    if patches.len() < 2 {
        return Err(Error::validation(format!("need at least 2 patches, got {}", patches.len())));
    }
    let mut model = SslModel::<f32>::new(setup.encoder, setup.mlp, setup.hyper, setup.seed)?;
    let mut history = Vec::new();
    let mut epoch_losses = Vec::new();
    for epoch in 0..setup.hyper.epochs {
        let order = epoch_order(patches.len(), setup.seed, epoch);
        let mut sum = 0.0;
        let batches = epoch_batches(patches.len(), setup.hyper.batch_size);
        for range in &batches {
            let (v1, v2) = view_batch(patches, &order, range.clone(), setup.seed, epoch, setup.augment)?;
            let report = model.train_step(&v1, &v2)?;
            sum += report.loss_total;
            history.push(report);
        }
        let mean = sum / batches.len().max(1) as f64;
        let last_std = history.last().map_or(0.0, |r| r.embedding_std);
        info!("epoch {}/{}: loss {mean:.4}, embedding std {last_std:.4}", epoch + 1, setup.hyper.epochs);
        epoch_losses.push(mean);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_losses(&history, &dir.join(LOSSES_FILE))?;
        let meta = RunMeta {
            config: setup.config_echo.clone(),
            epoch: setup.hyper.epochs,
            loss_history: epoch_losses.clone(),
            val_accuracy_history: Vec::new(),
            rng_state: RngState {
                seed: setup.seed,
                next_epoch: setup.hyper.epochs as u64,
            },
        };
        save_checkpoint(&model.export()?, &meta, &dir.join(CHECKPOINT_DIR))?;
    }
    Ok(PretrainOutcome {
        model,
        history,
        epoch_losses,
    })
}

pub fn write_losses(history: &[SslStepReport], path: &Path) -> Result<()> {
    let mut text = String::from("step,loss_cross_view,loss_cross_model,loss_total,embedding_std\n");
    for r in history {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            r.step, r.loss_cross_view, r.loss_cross_model, r.loss_total, r.embedding_std
        );
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batching_rules() {
        assert_eq!(epoch_batches(10, 4), vec![0..4, 4..8]);
        assert_eq!(epoch_batches(3, 4), vec![0..3]);
        assert!(epoch_batches(1, 4).is_empty());
    }

    #[test]
    fn shuffle_depends_on_epoch_only_through_seed_path() {
        assert_eq!(epoch_order(50, 1, 2), epoch_order(50, 1, 2));
        assert_ne!(epoch_order(50, 1, 2), epoch_order(50, 1, 3));
    }

    #[test]
    fn embedding_std_zero_for_identical_columns() {
        let q = FeatureMap::<f64>::from_columns(2, 3, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(embedding_std(&q) < 1e-12);
        let q = FeatureMap::<f64>::from_columns(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!((embedding_std(&q) - 0.5).abs() < 1e-9);
    }
}
