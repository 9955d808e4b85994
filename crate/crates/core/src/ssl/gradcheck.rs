//! Finite-difference verification of the analytic loss gradient on a tiny
//! double-precision network.

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::config::{EncoderConfig, MlpConfig, SslHyperparams};
use super::pretrain::{teacher_ema, SslModel};
use crate::nn::{FeatureMap, Module, NormMode};
use crate::rng::{rng_for, stream};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub tolerance: f64,
    pub coordinates: usize,
    pub step: f64,
    pub batch: usize,
    pub view_size: usize,
    pub seed: u64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Step for the convergence-order probe. At `step` itself a
    /// double-precision central difference is rounding-limited, so the
    /// order is measured at this larger step and its double.
    pub convergence_step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            coordinates: 200,
            step: 1e-5,
            batch: 4,
            view_size: 8,
            seed: 0,
            floor: 1e-6,
            convergence_step: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordinateCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// Largest offenders first.
    pub worst: Vec<CoordinateCheck>,
    pub teacher_params: usize,
    pub teacher_max_abs_grad: f64,
    /// Median of `|numeric(2h) − analytic| / |numeric(h) − analytic|` over
    /// the coordinates whose error at `2h` is well above the rounding floor;
    /// about 4 for a second-order stencil.
    pub convergence_ratio: f64,
    pub convergence_coordinates: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.teacher_max_abs_grad == 0.0
    }
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        channels: vec![32, 64],
        ..EncoderConfig::small_conv()
    }
}

pub fn tiny_mlp() -> MlpConfig {
    MlpConfig {
        hidden_size: 16,
        output_size: 8,
    }
}

/// Visits trainable coordinate `(tensor, index)` of the student.
fn with_coordinate<R>(model: &mut SslModel<f64>, tensor: usize, index: usize, f: impl FnOnce(&mut f64) -> R) -> R {
    let mut f = Some(f);
    let mut out = None;
    let mut slot = 0;
    model.student.visit_mut("", &mut |_, p| {
        if !p.role.trainable() {
            return;
        }
        if slot == tensor {
            out = Some((f.take().expect("visited once"))(&mut p.value[index]));
        }
        slot += 1;
    });
    out.expect("coordinate exists")
}

pub fn gradient_check(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.batch < 2 || cfg.batch > 4 {
        return Err(Error::validation(format!("gradcheck batch must be 2..=4, got {}", cfg.batch)));
    }
    let hyper = SslHyperparams {
        batch_size: cfg.batch,
        ..SslHyperparams::default()
    };
    let mut model = SslModel::<f64>::new(&tiny_encoder(), &tiny_mlp(), &hyper, cfg.seed)?;
    // Move the teacher off the student so the cross-model term is generic.
    let other = SslModel::<f64>::new(&tiny_encoder(), &tiny_mlp(), &hyper, cfg.seed ^ 0x9e37_79b9)?;
    teacher_ema(&mut model.teacher, &other.student, 0.5)?;

    let mut rng = rng_for(cfg.seed, &[stream::GRADCHECK]);
    let v = cfg.view_size;
    let mut views = || {
        let data = (0..cfg.batch * v * v).map(|_| StandardNormal.sample(&mut rng)).collect();
        FeatureMap::from_vec(1, cfg.batch, v, v, data)
    };
    let (v1, v2) = (views(), views());

    model.forward_backward(&v1, &v2, NormMode::BatchStats)?;
    let mut tensors = Vec::new();
    model.student.visit("", &mut |name, p| {
        if p.role.trainable() {
            tensors.push((name, p.grad.clone()));
        }
    });
    let mut teacher_params = 0;
    let mut teacher_max_abs_grad: f64 = 0.0;
    model.teacher.visit("", &mut |_, p| {
        teacher_params += p.len();
        for g in &p.grad {
            teacher_max_abs_grad = teacher_max_abs_grad.max(g.abs());
        }
    });

    // One coordinate from every tensor, then uniform draws over the rest.
    let flat: Vec<(usize, usize)> = tensors
        .iter()
        .enumerate()
        .flat_map(|(t, (_, g))| (0..g.len()).map(move |i| (t, i)))
        .collect();
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    for (t, (_, g)) in tensors.iter().enumerate() {
        chosen.push((t, sample(&mut rng, g.len(), 1).index(0)));
    }
    let extra = cfg.coordinates.saturating_sub(chosen.len()).min(flat.len());
    for i in sample(&mut rng, flat.len(), extra) {
        if !chosen.contains(&flat[i]) {
            chosen.push(flat[i]);
        }
    }

    let central = |model: &mut SslModel<f64>, t: usize, i: usize, h: f64| -> Result<f64> {
        let orig = with_coordinate(model, t, i, |x| {
            let o = *x;
            *x = o + h;
            o
        });
        let plus = model.loss(&v1, &v2)?;
        with_coordinate(model, t, i, |x| *x = orig - h);
        let minus = model.loss(&v1, &v2)?;
        with_coordinate(model, t, i, |x| *x = orig);
        Ok((plus - minus) / (2.0 * h))
    };

    let base_loss = model.loss(&v1, &v2)?;
    // Rounding error of a central difference is about ε·|L|/h.
    let rounding = |h: f64| f64::EPSILON * base_loss.abs().max(1.0) / h;
    let mut checks = Vec::with_capacity(chosen.len());
    let mut ratios = Vec::new();
    for &(t, i) in &chosen {
        let analytic = tensors[t].1[i];
        let numeric = central(&mut model, t, i, cfg.step)?;
        let hc = cfg.convergence_step;
        let e_h = (central(&mut model, t, i, hc)? - analytic).abs();
        let e_2h = (central(&mut model, t, i, 2.0 * hc)? - analytic).abs();
        if e_h > 100.0 * rounding(hc) {
            ratios.push(e_2h / e_h);
        }
        let rel_error = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
        checks.push(CoordinateCheck {
            name: tensors[t].0.clone(),
            index: i,
            analytic,
            numeric,
            rel_error,
        });
    }
    checks.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    let max_rel_error = checks.first().map_or(0.0, |c| c.rel_error);
    let checked = checks.len();
    checks.truncate(10);
    Ok(GradcheckReport {
        checked,
        tolerance: cfg.tolerance,
        max_rel_error,
        worst: checks,
        teacher_params,
        teacher_max_abs_grad,
        convergence_ratio: median(&mut ratios),
        convergence_coordinates: ratios.len(),
    })
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
