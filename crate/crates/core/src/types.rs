//! Domain types shared by every stage of the pipeline.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    /// Integer depth of the source file (8 or 16); 16 for in-memory images.
    pub bit_depth_source: u8,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, bit_depth_source: u8) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation(format!("image dimensions {width}x{height} must be >= 1")));
        }
        if pixels.len() != width * height {
            return Err(Error::validation(format!(
                "image has {} pixels, expected {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
            bit_depth_source,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], 16)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Square crop with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, size: usize) -> Result<GrayImage> {
        if x + size > self.width || y + size > self.height || size == 0 {
            return Err(Error::validation(format!(
                "crop ({x},{y},{size}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(size * size);
        for row in y..y + size {
            out.extend_from_slice(&self.pixels[row * self.width + x..row * self.width + x + size]);
        }
        Ok(GrayImage {
            width: size,
            height: size,
            pixels: out,
            bit_depth_source: self.bit_depth_source,
        })
    }
}

/// Boolean stomach region, `true` inside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StomachMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl StomachMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height || width == 0 || height == 0 {
            return Err(Error::validation(format!(
                "mask has {} bits, expected {}x{}",
                bits.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn true_fraction(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }

    pub fn matches(&self, image: &GrayImage) -> bool {
        self.width == image.width() && self.height == image.height()
    }
}

/// Patch class: outside the stomach, inside a negative patient, inside a
/// positive patient. The discriminant is the classifier output index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PatchLabel {
    O = 0,
    N = 1,
    P = 2,
}

impl PatchLabel {
    pub const ALL: [PatchLabel; 3] = [PatchLabel::O, PatchLabel::N, PatchLabel::P];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// In-stomach label for a patient of the given class.
    pub fn inside(patient: PatientLabel) -> Self {
        match patient {
            PatientLabel::Negative => PatchLabel::N,
            PatientLabel::Positive => PatchLabel::P,
        }
    }
}

impl fmt::Display for PatchLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PatchLabel::O => "O",
            PatchLabel::N => "N",
            PatchLabel::P => "P",
        };
        f.write_str(s)
    }
}

/// Patient ground truth, encoded 0/1 in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatientLabel {
    Negative,
    Positive,
}

impl PatientLabel {
    pub fn as_u8(self) -> u8 {
        match self {
            PatientLabel::Negative => 0,
            PatientLabel::Positive => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(PatientLabel::Negative),
            1 => Some(PatientLabel::Positive),
            _ => None,
        }
    }
}

/// One tiled sub-image. `label` is `None` for unlabeled test-time patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub patient_id: String,
    pub patient_label: PatientLabel,
    pub grid_x: usize,
    pub grid_y: usize,
    pub size: usize,
    pub label: Option<PatchLabel>,
    pub pixels: GrayImage,
}

impl PatchRecord {
    /// Label/patient consistency: P only in positive patients, N only in
    /// negative ones.
    pub fn is_consistent(&self) -> bool {
        !matches!(
            (self.label, self.patient_label),
            (Some(PatchLabel::P), PatientLabel::Negative) | (Some(PatchLabel::N), PatientLabel::Positive)
        )
    }
}
