//! Procedural stand-in for a radiograph cohort.
//!
//! Each patient image is a bright stomach region on a dim, gently graded
//! background. Inside the region, negative patients show straight parallel
//! fold bands on a uniform surface; positive patients show phase-wobbled
//! folds and a multiplicative speckle texture. All random draws are made
//! regardless of the label, so with the class-specific gains set to zero
//! both classes render the same image.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::image_io::{save_gray_png16, save_mask};
use crate::manifest::{DatasetManifest, PatientEntry, Split};
use crate::rng::{derive_seed, rng_for, stream, Rng};
use crate::types::{GrayImage, PatientLabel, StomachMask};
use crate::{Error, Result};

pub const MASK_FRACTION_RANGE: (f64, f64) = (0.15, 0.60);
const MAX_MASK_DRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub positive_fraction: f64,
    /// Fold cycles across the image width.
    pub fold_frequency_neg: f64,
    /// Fold phase wobble amplitude, pixels at a 512-pixel image.
    pub fold_wobble_pos: f64,
    pub speckle_gain_pos: f64,
    /// Gaussian correlation length of the speckle, pixels.
    pub speckle_grain_px: f64,
    /// Stomach radii as fractions of the image side.
    pub blob_radius_range: [f64; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 512,
            positive_fraction: 0.5,
            fold_frequency_neg: 6.0,
            fold_wobble_pos: 18.0,
            speckle_gain_pos: 0.35,
            speckle_grain_px: 1.0,
            blob_radius_range: [0.28, 0.40],
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Desk-scale cohort for the few-shot experiments: 256-pixel images, a
    /// faint speckle coarse enough to survive 32-pixel views, small wobble.
    pub fn fixture() -> Self {
        Self {
            image_size: 256,
            fold_wobble_pos: 6.0,
            speckle_gain_pos: 0.15,
            speckle_grain_px: 2.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::validation(format!("image_size {} too small", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::validation(format!(
                "positive_fraction {} outside [0, 1]",
                self.positive_fraction
            )));
        }
        if !(self.speckle_grain_px >= 0.3 && self.speckle_grain_px.is_finite()) {
            return Err(Error::validation(format!("speckle_grain_px {} < 0.3", self.speckle_grain_px)));
        }
        let [lo, hi] = self.blob_radius_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::validation(format!("blob_radius_range {:?} invalid", self.blob_radius_range)));
        }
        for (name, v) in [
            ("fold_frequency_neg", self.fold_frequency_neg),
            ("fold_wobble_pos", self.fold_wobble_pos),
            ("speckle_gain_pos", self.speckle_gain_pos),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// The image must hold at least four patches per side downstream.
    pub fn validate_for_patch(&self, patch_size: usize) -> Result<()> {
        self.validate()?;
        if self.image_size < 4 * patch_size {
            return Err(Error::validation(format!(
                "image_size {} < 4 x patch size {patch_size}",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthPatient {
    pub patient_id: String,
    pub patient_label: PatientLabel,
    pub image: GrayImage,
    pub mask: StomachMask,
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

struct MaskShape {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    exponent: f64,
    lobe_amp: f64,
    lobes: f64,
    lobe_phase: f64,
}

impl MaskShape {
    fn draw(rng: &mut Rng, cfg: &SynthConfig) -> Self {
        let s = cfg.image_size as f64;
        let [r0, r1] = cfg.blob_radius_range;
        Self {
            cx: s * (0.5 + uniform(rng, -0.06, 0.06)),
            cy: s * (0.5 + uniform(rng, -0.06, 0.06)),
            rx: s * uniform(rng, r0, r1),
            ry: s * uniform(rng, r0, r1),
            angle: uniform(rng, 0.0, PI),
            exponent: uniform(rng, 2.2, 3.5),
            lobe_amp: uniform(rng, 0.02, 0.06),
            lobes: (3 + rng.random_range(0..3u32)) as f64,
            lobe_phase: uniform(rng, 0.0, 2.0 * PI),
        }
    }

    fn rasterize(&self, size: usize) -> StomachMask {
        let (sin, cos) = self.angle.sin_cos();
        let mut mask = StomachMask::filled(size, size, false);
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - self.cx;
                let dy = y as f64 + 0.5 - self.cy;
                let u = (dx * cos + dy * sin) / self.rx;
                let v = (-dx * sin + dy * cos) / self.ry;
                let r = (u.abs().powf(self.exponent) + v.abs().powf(self.exponent)).powf(1.0 / self.exponent);
                let theta = v.atan2(u);
                let boundary = 1.0 + self.lobe_amp * (self.lobes * theta + self.lobe_phase).sin();
                if r <= boundary {
                    mask.set(x, y, true);
                }
            }
        }
        mask
    }
}

/// Gaussian-smoothed white noise with unit standard deviation.
fn speckle_field(rng: &mut Rng, size: usize, grain: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..size * size).map(|_| StandardNormal.sample(rng)).collect();
    let radius = (3.0 * grain).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * grain * grain)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= ksum);
    // Separable smoothing scales white-noise variance by (Σk²)².
    let gain = 1.0 / kernel.iter().map(|k| k * k).sum::<f64>();
    let n = size as isize;
    let clampi = |i: isize| i.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * white[y * size + clampi(x as isize + k as isize - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clampi(y as isize + k as isize - radius) * size + x])
                .sum();
            out[y * size + x] = v * gain;
        }
    }
    out
}

/// Renders one patient; a pure function of `(cfg, patient_seed, label)`
/// (`cfg.seed` is not consulted here; cohorts fold it into `patient_seed`).
pub fn generate_patient(cfg: &SynthConfig, patient_seed: u64, label: PatientLabel) -> Result<SynthPatient> {
    cfg.validate()?;
    let size = cfg.image_size;
    let s = size as f64;
    let mut rng = rng_for(patient_seed, &[stream::PATIENT]);

    let mut mask = None;
    for _ in 0..MAX_MASK_DRAWS {
        let m = MaskShape::draw(&mut rng, cfg).rasterize(size);
        let frac = m.true_fraction();
        if (MASK_FRACTION_RANGE.0..=MASK_FRACTION_RANGE.1).contains(&frac) {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        Error::Generation(format!(
            "mask fraction outside {MASK_FRACTION_RANGE:?} after {MAX_MASK_DRAWS} draws; cfg = {}",
            serde_json::to_string(cfg).unwrap_or_default()
        ))
    })?;

    let bg_level = uniform(&mut rng, 0.06, 0.14);
    let bg_dir = uniform(&mut rng, 0.0, 2.0 * PI);
    let bg_amp = uniform(&mut rng, 0.02, 0.06);
    let base = uniform(&mut rng, 0.42, 0.55);
    let fold_amp = uniform(&mut rng, 0.10, 0.16);
    let fold_angle = uniform(&mut rng, 0.0, PI);
    let fold_freq = cfg.fold_frequency_neg * uniform(&mut rng, 0.85, 1.15);
    let fold_phase = uniform(&mut rng, 0.0, 2.0 * PI);
    let wobble_freq = uniform(&mut rng, 1.5, 3.0);
    let wobble_phase = uniform(&mut rng, 0.0, 2.0 * PI);
    let wobble_phase2 = uniform(&mut rng, 0.0, 2.0 * PI);
    let speckle = speckle_field(&mut rng, size, cfg.speckle_grain_px);
    let noise: Vec<f64> = (0..size * size).map(|_| StandardNormal.sample(&mut rng)).collect();

    let positive = label == PatientLabel::Positive;
    let wobble = if positive { cfg.fold_wobble_pos * s / 512.0 } else { 0.0 };
    let speckle_gain = if positive { cfg.speckle_gain_pos } else { 0.0 };
    let (fs, fc) = fold_angle.sin_cos();
    let (bs, bc) = bg_dir.sin_cos();

    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let i = y * size + x;
            let v = if mask.get(x, y) {
                let across = xf * fc + yf * fs;
                let along = -xf * fs + yf * fc;
                let bend = wobble
                    * ((2.0 * PI * wobble_freq * along / s + wobble_phase).sin()
                        + 0.5 * (2.0 * PI * 2.3 * wobble_freq * along / s + wobble_phase2).sin());
                let fold = (2.0 * PI * fold_freq * (across + bend) / s + fold_phase).sin();
                (base + fold_amp * fold) * (1.0 + speckle_gain * speckle[i])
            } else {
                bg_level + bg_amp * ((xf * bc + yf * bs) / s)
            };
            pixels.push((v + cfg.noise_sigma * noise[i]).clamp(0.0, 1.0) as f32);
        }
    }
    Ok(SynthPatient {
        patient_id: format!("seed{patient_seed:016x}"),
        patient_label: label,
        image: GrayImage::new(size, size, pixels, 16)?,
        mask,
    })
}

/// Label of the `index`-th cohort member. Positives are spread so that any
/// prefix of length `n` holds exactly `round(fraction · n)` of them.
pub fn cohort_label(positive_fraction: f64, index: usize) -> PatientLabel {
    let before = (positive_fraction * index as f64).round();
    let after = (positive_fraction * (index + 1) as f64).round();
    if after > before {
        PatientLabel::Positive
    } else {
        PatientLabel::Negative
    }
}

pub fn cohort_patient_id(seed: u64, index: usize) -> String {
    format!("s{seed}-{index:04}")
}

/// Generates `n_patients` patients and their manifest (split `ssl_train`,
/// relative `{id}.png` / `{id}.mask.png` paths, provenance = config JSON).
pub fn generate_cohort(cfg: &SynthConfig, n_patients: usize) -> Result<(Vec<SynthPatient>, DatasetManifest)> {
    generate_cohort_split(cfg, n_patients, Split::SslTrain)
}

pub fn generate_cohort_split(
    cfg: &SynthConfig,
    n_patients: usize,
    split: Split,
) -> Result<(Vec<SynthPatient>, DatasetManifest)> {
    if n_patients < 2 {
        return Err(Error::validation(format!("cohort needs >= 2 patients, got {n_patients}")));
    }
    cfg.validate()?;
    let mut patients = Vec::with_capacity(n_patients);
    let mut entries = Vec::with_capacity(n_patients);
    for i in 0..n_patients {
        let label = cohort_label(cfg.positive_fraction, i);
        let seed = derive_seed(cfg.seed, &[stream::PATIENT, i as u64]);
        let mut p = generate_patient(cfg, seed, label)?;
        p.patient_id = cohort_patient_id(cfg.seed, i);
        entries.push(PatientEntry {
            patient_id: p.patient_id.clone(),
            patient_label: label,
            image: format!("{}.png", p.patient_id).into(),
            mask: Some(format!("{}.mask.png", p.patient_id).into()),
        });
        patients.push(p);
    }
    let manifest = DatasetManifest::new(split, entries, cfg.seed, serde_json::to_string(cfg)?)?;
    Ok((patients, manifest))
}

/// Writes `{id}.png` (16-bit), `{id}.mask.png` and `manifest.json` into
/// `dir`; returns the manifest path.
pub fn write_cohort(patients: &[SynthPatient], manifest: &DatasetManifest, dir: &Path) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in patients {
        save_gray_png16(&p.image, &dir.join(format!("{}.png", p.patient_id)))?;
        save_mask(&p.mask, &dir.join(format!("{}.mask.png", p.patient_id)))?;
    }
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
