//! Regular-grid tiling of patient images and O/N/P labelling by the share
//! of each tile that lies inside the stomach mask.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::image_io::{load_gray_image, load_mask, quantize_u8, save_gray_png8};
use crate::manifest::{DatasetManifest, PatchLocator, PatientEntry};
use crate::types::{GrayImage, PatchLabel, PatchRecord, PatientLabel, StomachMask};
use crate::{Error, Result};

pub const CROPS_FILE: &str = "crops.bin";
pub const CROPS_INDEX_FILE: &str = "crops.index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TilingSpec {
    pub patch_size: usize,
    pub stride: usize,
    /// Tiles with an inside share strictly below this are labelled O.
    pub outside_max_fraction: f64,
    /// Tiles with an inside share at or above this are labelled N or P.
    pub inside_min_fraction: f64,
}

impl Default for TilingSpec {
    fn default() -> Self {
        Self::synthetic()
    }
}

impl TilingSpec {
    /// Geometry used on full-resolution 2048-pixel radiographs.
    pub fn paper() -> Self {
        Self {
            patch_size: 299,
            stride: 50,
            ..Self::synthetic()
        }
    }

    pub fn synthetic() -> Self {
        Self {
            patch_size: 64,
            stride: 32,
            outside_max_fraction: 0.01,
            inside_min_fraction: 0.85,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 || self.stride > self.patch_size {
            return Err(Error::validation(format!(
                "stride {} must lie in [1, patch_size = {}]",
                self.stride, self.patch_size
            )));
        }
        let (lo, hi) = (self.outside_max_fraction, self.inside_min_fraction);
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::validation(format!(
                "need 0 <= outside_max_fraction ({lo}) < inside_min_fraction ({hi}) <= 1"
            )));
        }
        Ok(())
    }

    /// Bucket for a tile whose inside share is `fraction`; `None` = discard.
    pub fn bucket(&self, fraction: f64, patient: PatientLabel) -> Option<PatchLabel> {
        if fraction < self.outside_max_fraction {
            Some(PatchLabel::O)
        } else if fraction >= self.inside_min_fraction {
            Some(PatchLabel::inside(patient))
        } else {
            None
        }
    }
}

/// Top-left corners of every full tile, row-major.
pub fn tile_positions(width: usize, height: usize, spec: &TilingSpec) -> Result<Vec<(usize, usize)>> {
    spec.validate()?;
    if width < spec.patch_size || height < spec.patch_size {
        return Err(Error::validation(format!(
            "image {width}x{height} smaller than patch size {}",
            spec.patch_size
        )));
    }
    let nx = (width - spec.patch_size) / spec.stride + 1;
    let ny = (height - spec.patch_size) / spec.stride + 1;
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push((i * spec.stride, j * spec.stride));
        }
    }
    Ok(out)
}

/// Summed-area table over mask bits for O(1) window counts.
pub struct MaskIntegral {
    width: usize,
    height: usize,
    sums: Vec<u64>,
}

impl MaskIntegral {
    pub fn new(mask: &StomachMask) -> Self {
        let (w, h) = (mask.width(), mask.height());
        let mut sums = vec![0u64; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += mask.get(x, y) as u64;
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self {
            width: w,
            height: h,
            sums,
        }
    }

    pub fn count(&self, x: usize, y: usize, size: usize) -> Result<u64> {
        if size == 0 || x + size > self.width || y + size > self.height {
            return Err(Error::validation(format!(
                "window ({x}, {y}, {size}) outside {}x{} mask",
                self.width, self.height
            )));
        }
        let s = |xx: usize, yy: usize| self.sums[yy * (self.width + 1) + xx];
        Ok(s(x + size, y + size) + s(x, y) - s(x + size, y) - s(x, y + size))
    }

    pub fn fraction(&self, x: usize, y: usize, size: usize) -> Result<f64> {
        // Integer count first, one rounding in the division.
        Ok(self.count(x, y, size)? as f64 / (size * size) as f64)
    }
}

pub fn area_fraction(mask: &StomachMask, grid_x: usize, grid_y: usize, size: usize) -> Result<f64> {
    MaskIntegral::new(mask).fraction(grid_x, grid_y, size)
}

/// Bucket of every tile position (`None` = discarded), row-major.
pub fn label_tiles(
    mask: &StomachMask,
    patient_label: PatientLabel,
    spec: &TilingSpec,
) -> Result<Vec<((usize, usize), Option<PatchLabel>)>> {
    let integral = MaskIntegral::new(mask);
    tile_positions(mask.width(), mask.height(), spec)?
        .into_iter()
        .map(|(x, y)| Ok(((x, y), spec.bucket(integral.fraction(x, y, spec.patch_size)?, patient_label))))
        .collect()
}

pub fn extract_labeled_patches(
    patient_id: &str,
    image: &GrayImage,
    mask: &StomachMask,
    patient_label: PatientLabel,
    spec: &TilingSpec,
) -> Result<Vec<PatchRecord>> {
    if !mask.matches(image) {
        return Err(Error::validation(format!(
            "{patient_id}: mask {}x{} does not match image {}x{}",
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        )));
    }
    let tiles = label_tiles(mask, patient_label, spec)?;
    let mut records = Vec::new();
    let mut discarded = 0usize;
    for ((x, y), label) in tiles {
        match label {
            Some(label) => records.push(PatchRecord {
                patient_id: patient_id.to_string(),
                patient_label,
                grid_x: x,
                grid_y: y,
                size: spec.patch_size,
                label: Some(label),
                pixels: image.crop(x, y, spec.patch_size)?,
            }),
            None => discarded += 1,
        }
    }
    debug!("{patient_id}: kept {} patches, discarded {discarded}", records.len());
    Ok(records)
}

/// Every tile of the image, unlabelled.
pub fn extract_test_patches(
    patient_id: &str,
    image: &GrayImage,
    patient_label: PatientLabel,
    spec: &TilingSpec,
) -> Result<Vec<PatchRecord>> {
    tile_positions(image.width(), image.height(), spec)?
        .into_iter()
        .map(|(x, y)| {
            Ok(PatchRecord {
                patient_id: patient_id.to_string(),
                patient_label,
                grid_x: x,
                grid_y: y,
                size: spec.patch_size,
                label: None,
                pixels: image.crop(x, y, spec.patch_size)?,
            })
        })
        .collect()
}

fn load_entry_mask(entry: &PatientEntry, image: &GrayImage) -> Result<StomachMask> {
    let path = entry
        .mask
        .as_ref()
        .ok_or_else(|| Error::validation(format!("patient {} has no mask", entry.patient_id)))?;
    let mask = load_mask(path)?;
    if !mask.matches(image) {
        return Err(Error::validation(format!(
            "patient {}: mask size differs from image",
            entry.patient_id
        )));
    }
    Ok(mask)
}

/// Tiles every patient of `manifest` with mask-based labels and returns the
/// manifest extended with the resulting patch index.
pub fn index_manifest(manifest: &DatasetManifest, spec: &TilingSpec) -> Result<(DatasetManifest, Vec<PatchRecord>)> {
    let mut all = Vec::new();
    for entry in &manifest.patients {
        let image = load_gray_image(&entry.image)?;
        let mask = load_entry_mask(entry, &image)?;
        all.extend(extract_labeled_patches(&entry.patient_id, &image, &mask, entry.patient_label, spec)?);
    }
    let mut out = manifest.clone();
    out.patch_index = Some(
        all.iter()
            .map(|r| PatchLocator {
                patient_id: r.patient_id.clone(),
                grid_x: r.grid_x,
                grid_y: r.grid_y,
                size: r.size,
                label: r.label,
            })
            .collect(),
    );
    out.validate()?;
    info!("indexed {} patches from {} patients", all.len(), manifest.patients.len());
    Ok((out, all))
}

/// Materializes the training patches of a manifest: from its patch index
/// when present, otherwise by tiling with the masks.
pub fn load_manifest_patches(manifest: &DatasetManifest, spec: &TilingSpec) -> Result<Vec<PatchRecord>> {
    let Some(index) = &manifest.patch_index else {
        return Ok(index_manifest(manifest, spec)?.1);
    };
    let entries: HashMap<&str, &PatientEntry> =
        manifest.patients.iter().map(|p| (p.patient_id.as_str(), p)).collect();
    let mut images: HashMap<&str, GrayImage> = HashMap::new();
    let mut out = Vec::with_capacity(index.len());
    for loc in index {
        let entry = entries
            .get(loc.patient_id.as_str())
            .ok_or_else(|| Error::validation(format!("patch refers to unknown patient {}", loc.patient_id)))?;
        if !images.contains_key(loc.patient_id.as_str()) {
            images.insert(entry.patient_id.as_str(), load_gray_image(&entry.image)?);
        }
        let image = &images[loc.patient_id.as_str()];
        let record = PatchRecord {
            patient_id: loc.patient_id.clone(),
            patient_label: entry.patient_label,
            grid_x: loc.grid_x,
            grid_y: loc.grid_y,
            size: loc.size,
            label: loc.label,
            pixels: image.crop(loc.grid_x, loc.grid_y, loc.size)?,
        };
        if !record.is_consistent() {
            return Err(Error::validation(format!(
                "patch ({}, {}) of {} has label {:?} inconsistent with patient label {:?}",
                loc.grid_x, loc.grid_y, loc.patient_id, loc.label, entry.patient_label
            )));
        }
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackedEntry {
    pub patient_id: String,
    pub patient_label: PatientLabel,
    pub grid_x: usize,
    pub grid_y: usize,
    pub size: usize,
    pub label: Option<PatchLabel>,
    pub offset: u64,
}

/// Writes `crops.bin` (8-bit crops back to back) and `crops.index.json`.
pub fn write_packed(records: &[PatchRecord], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut index = Vec::with_capacity(records.len());
    for r in records {
        index.push(PackedEntry {
            patient_id: r.patient_id.clone(),
            patient_label: r.patient_label,
            grid_x: r.grid_x,
            grid_y: r.grid_y,
            size: r.size,
            label: r.label,
            offset: bytes.len() as u64,
        });
        bytes.extend(r.pixels.pixels().iter().map(|&v| quantize_u8(v)));
    }
    let bin = dir.join(CROPS_FILE);
    std::fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    let idx = dir.join(CROPS_INDEX_FILE);
    std::fs::write(&idx, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&idx, e))
}

pub fn read_packed(dir: &Path) -> Result<Vec<PatchRecord>> {
    let bin = dir.join(CROPS_FILE);
    let idx = dir.join(CROPS_INDEX_FILE);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let text = std::fs::read_to_string(&idx).map_err(|e| Error::io(&idx, e))?;
    let index: Vec<PackedEntry> = serde_json::from_str(&text)?;
    index
        .into_iter()
        .map(|e| {
            let start = e.offset as usize;
            let end = start + e.size * e.size;
            let raw = bytes
                .get(start..end)
                .ok_or_else(|| Error::validation(format!("crop at offset {start} runs past {}", bin.display())))?;
            let pixels = raw.iter().map(|&b| b as f32 / 255.0).collect();
            Ok(PatchRecord {
                patient_id: e.patient_id,
                patient_label: e.patient_label,
                grid_x: e.grid_x,
                grid_y: e.grid_y,
                size: e.size,
                label: e.label,
                pixels: GrayImage::new(e.size, e.size, pixels, 8)?,
            })
        })
        .collect()
}

/// One 8-bit PNG per crop, named `{patient}_{x}_{y}.png`.
pub fn write_crop_pngs(records: &[PatchRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    records
        .iter()
        .map(|r| {
            let path = dir.join(format!("{}_{}_{}.png", r.patient_id, r.grid_x, r.grid_y));
            save_gray_png8(&r.pixels, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_and_synthetic_counts() {
        assert_eq!(tile_positions(2048, 2048, &TilingSpec::paper()).unwrap().len(), 1225);
        assert_eq!(tile_positions(512, 512, &TilingSpec::synthetic()).unwrap().len(), 225);
        assert_eq!(tile_positions(64, 64, &TilingSpec::synthetic()).unwrap(), vec![(0, 0)]);
        assert!(tile_positions(63, 64, &TilingSpec::synthetic()).is_err());
    }

    #[test]
    fn threshold_boundaries() {
        let spec = TilingSpec::synthetic();
        assert_eq!(spec.bucket(0.01, PatientLabel::Negative), None);
        assert_eq!(spec.bucket(0.0099, PatientLabel::Negative), Some(PatchLabel::O));
        assert_eq!(spec.bucket(17.0 / 20.0, PatientLabel::Positive), Some(PatchLabel::P));
        assert_eq!(spec.bucket(3481.0 / 4096.0, PatientLabel::Positive), None);
    }

    #[test]
    fn window_count_just_below_inside_threshold() {
        let mut mask = StomachMask::filled(64, 64, false);
        let mut set = 0;
        'outer: for y in 0..64 {
            for x in 0..64 {
                if set == 3481 {
                    break 'outer;
                }
                mask.set(x, y, true);
                set += 1;
            }
        }
        let f = area_fraction(&mask, 0, 0, 64).unwrap();
        assert_eq!(f, 3481.0 / 4096.0);
        assert!(f < 0.85);
        assert!(area_fraction(&mask, 1, 0, 64).is_err());
    }

    #[test]
    fn packed_round_trip() {
        let img = GrayImage::new(4, 4, (0..16).map(|i| i as f32 / 15.0).collect(), 8).unwrap();
        let mask = StomachMask::filled(4, 4, true);
        let spec = TilingSpec {
            patch_size: 2,
            stride: 2,
            ..TilingSpec::synthetic()
        };
        let recs = extract_labeled_patches("a", &img, &mask, PatientLabel::Positive, &spec).unwrap();
        assert_eq!(recs.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        write_packed(&recs, dir.path()).unwrap();
        let back = read_packed(dir.path()).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!((a.grid_x, a.grid_y, a.label), (b.grid_x, b.grid_y, b.label));
            for (x, y) in a.pixels.pixels().iter().zip(b.pixels.pixels()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}
