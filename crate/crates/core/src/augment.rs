//! Stochastic view generation: crop, resize, horizontal flip, Gaussian blur,
//! then intensity normalization.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, rng_for, Rng};
use crate::types::GrayImage;
use crate::{Error, Result};

/// Blur sigmas below this leave the view untouched.
pub const BLUR_SIGMA_MIN: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub view_size: usize,
    /// Crop area as a fraction of the patch area.
    pub crop_scale_range: [f64; 2],
    /// Crop width / height.
    pub crop_aspect_range: [f64; 2],
    pub hflip_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_range: [f64; 2],
    pub normalize_mean: f64,
    pub normalize_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            view_size: 128,
            crop_scale_range: [0.4, 1.0],
            crop_aspect_range: [3.0 / 4.0, 4.0 / 3.0],
            hflip_prob: 0.5,
            blur_prob: 0.5,
            blur_sigma_range: [0.1, 2.0],
            normalize_mean: 0.5,
            normalize_std: 0.25,
        }
    }
}

impl AugmentConfig {
    /// 32-pixel views. The blur ceiling shrinks with the view (2.0 at 128
    /// becomes 0.5) so the same fraction of image structure survives.
    pub fn synthetic() -> Self {
        Self {
            view_size: 32,
            blur_sigma_range: [0.1, 0.5],
            ..Self::default()
        }
    }

    /// A distribution that always yields the identity transform.
    pub fn identity(view_size: usize) -> Self {
        Self {
            view_size,
            crop_scale_range: [1.0, 1.0],
            crop_aspect_range: [1.0, 1.0],
            hflip_prob: 0.0,
            blur_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_size < 8 {
            return Err(Error::validation(format!("view_size {} < 8", self.view_size)));
        }
        let range = |name: &str, [lo, hi]: [f64; 2], min: f64| {
            if lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi {
                Ok(())
            } else {
                Err(Error::validation(format!("{name} [{lo}, {hi}] is not a valid range")))
            }
        };
        range("crop_scale_range", self.crop_scale_range, f64::MIN_POSITIVE)?;
        if self.crop_scale_range[1] > 1.0 {
            return Err(Error::validation("crop_scale_range upper bound exceeds 1"));
        }
        range("crop_aspect_range", self.crop_aspect_range, f64::MIN_POSITIVE)?;
        range("blur_sigma_range", self.blur_sigma_range, 0.0)?;
        for (name, p) in [("hflip_prob", self.hflip_prob), ("blur_prob", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.normalize_std > 0.0 && self.normalize_std.is_finite() && self.normalize_mean.is_finite()) {
            return Err(Error::validation("normalize_std must be positive and finite"));
        }
        Ok(())
    }
}

/// A fully resolved transform. The crop rectangle is expressed as fractions
/// of the source side so the same spec applies to any patch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub crop_x: f64,
    pub crop_y: f64,
    pub crop_w: f64,
    pub crop_h: f64,
    pub hflip: bool,
    pub blur: bool,
    pub blur_sigma: f64,
}

impl TransformSpec {
    pub const IDENTITY: TransformSpec = TransformSpec {
        crop_x: 0.0,
        crop_y: 0.0,
        crop_w: 1.0,
        crop_h: 1.0,
        hflip: false,
        blur: false,
        blur_sigma: 0.0,
    };
}

fn uniform(rng: &mut Rng, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws a transform. The number of RNG draws is fixed, whatever the outcome.
pub fn sample_transform(rng: &mut Rng, cfg: &AugmentConfig) -> TransformSpec {
    let scale = uniform(rng, cfg.crop_scale_range);
    let [a0, a1] = cfg.crop_aspect_range;
    let aspect = uniform(rng, [a0.ln(), a1.ln()]).exp();
    let crop_w = (scale * aspect).sqrt().min(1.0);
    let crop_h = (scale / aspect).sqrt().min(1.0);
    let crop_x = (1.0 - crop_w) * rng.random::<f64>();
    let crop_y = (1.0 - crop_h) * rng.random::<f64>();
    let hflip = rng.random::<f64>() < cfg.hflip_prob;
    let blur = rng.random::<f64>() < cfg.blur_prob;
    let blur_sigma = uniform(rng, cfg.blur_sigma_range);
    TransformSpec {
        crop_x,
        crop_y,
        crop_w,
        crop_h,
        hflip,
        blur,
        blur_sigma,
    }
}

/// Bilinear resample of the crop rectangle to `out × out`, sampling at
/// pixel centres and clamping at the borders.
fn crop_resize(src: &[f32], side: usize, spec: &TransformSpec, out: usize) -> Vec<f64> {
    let s = side as f64;
    let (x0, y0) = (spec.crop_x * s, spec.crop_y * s);
    let (sx, sy) = (spec.crop_w * s / out as f64, spec.crop_h * s / out as f64);
    let max = (side - 1) as f64;
    let axis = |origin: f64, step: f64, i: usize| {
        let p = (origin + (i as f64 + 0.5) * step - 0.5).clamp(0.0, max);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(side - 1);
        (lo, hi, p - lo as f64)
    };
    let cols: Vec<_> = (0..out).map(|i| axis(x0, sx, i)).collect();
    let mut dst = Vec::with_capacity(out * out);
    for j in 0..out {
        let (y_lo, y_hi, fy) = axis(y0, sy, j);
        for &(x_lo, x_hi, fx) in &cols {
            let at = |x: usize, y: usize| src[y * side + x] as f64;
            let top = at(x_lo, y_lo) * (1.0 - fx) + at(x_hi, y_lo) * fx;
            let bottom = at(x_lo, y_hi) * (1.0 - fx) + at(x_hi, y_hi) * fx;
            dst.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    dst
}

fn hflip(img: &mut [f64], side: usize) {
    for row in img.chunks_mut(side) {
        row.reverse();
    }
}

/// Normalized 1-D Gaussian taps over `[-ceil(3σ), ceil(3σ)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable blur with clamped (replicated) edges.
fn blur(img: &mut [f64], side: usize, sigma: f64) {
    if sigma < BLUR_SIGMA_MIN {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let n = side as isize;
    let idx = |i: isize| i.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..side {
        for x in 0..side {
            tmp[y * side + x] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * img[y * side + idx(x as isize + t as isize - r)])
                .sum();
        }
    }
    for y in 0..side {
        for x in 0..side {
            img[y * side + x] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * tmp[idx(y as isize + t as isize - r) * side + x])
                .sum();
        }
    }
}

pub fn normalize(v: f64, cfg: &AugmentConfig) -> f64 {
    (v - cfg.normalize_mean) / cfg.normalize_std
}

pub fn denormalize(v: f64, cfg: &AugmentConfig) -> f64 {
    v * cfg.normalize_std + cfg.normalize_mean
}

/// crop → resize → flip → blur → normalize on a square `side × side` patch.
pub fn apply_transform(src: &[f32], side: usize, spec: &TransformSpec, cfg: &AugmentConfig) -> Result<Vec<f32>> {
    if side == 0 || src.len() != side * side {
        return Err(Error::validation(format!("patch of {} pixels is not {side}x{side}", src.len())));
    }
    if let Some(i) = src.iter().position(|v| !v.is_finite()) {
        return Err(Error::validation(format!("non-finite input pixel at index {i}")));
    }
    let out = cfg.view_size;
    let mut view = crop_resize(src, side, spec, out);
    if spec.hflip {
        hflip(&mut view, out);
    }
    if spec.blur {
        blur(&mut view, out, spec.blur_sigma);
    }
    Ok(view.into_iter().map(|v| normalize(v, cfg) as f32).collect())
}

/// Deterministic evaluation view: whole patch resized, normalized.
pub fn eval_view(patch: &GrayImage, cfg: &AugmentConfig) -> Result<Vec<f32>> {
    apply_transform(patch.pixels(), patch.width(), &TransformSpec::IDENTITY, cfg)
}

/// Evaluation view, horizontally flipped with probability `hflip_prob`.
pub fn flip_view(patch: &GrayImage, rng: &mut Rng, cfg: &AugmentConfig) -> Result<Vec<f32>> {
    let spec = TransformSpec {
        hflip: rng.random::<f64>() < cfg.hflip_prob,
        ..TransformSpec::IDENTITY
    };
    apply_transform(patch.pixels(), patch.width(), &spec, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub v1: Vec<f32>,
    pub v2: Vec<f32>,
    pub seed1: u64,
    pub seed2: u64,
}

/// Two independently transformed views of one patch, seeded from `seed`.
pub fn make_views(patch: &GrayImage, seed: u64, cfg: &AugmentConfig) -> Result<ViewPair> {
    if patch.width() != patch.height() {
        return Err(Error::validation(format!(
            "patch must be square, got {}x{}",
            patch.width(),
            patch.height()
        )));
    }
    let seed1 = derive_seed(seed, &[1]);
    let seed2 = derive_seed(seed, &[2]);
    let view = |s: u64| {
        let spec = sample_transform(&mut rng_for(s, &[]), cfg);
        apply_transform(patch.pixels(), patch.width(), &spec, cfg)
    };
    Ok(ViewPair {
        v1: view(seed1)?,
        v2: view(seed2)?,
        seed1,
        seed2,
    })
}
