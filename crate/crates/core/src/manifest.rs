//! Dataset manifests: which patients (and optionally which patches) belong
//! to a split of an experiment.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::types::{PatchLabel, PatientLabel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SslTrain,
    FinetuneTrain,
    FinetuneVal,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientEntry {
    pub patient_id: String,
    pub patient_label: PatientLabel,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

/// Where a patch lives inside its patient image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchLocator {
    pub patient_id: String,
    pub grid_x: usize,
    pub grid_y: usize,
    pub size: usize,
    #[serde(default)]
    pub label: Option<PatchLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: Split,
    pub patients: Vec<PatientEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_index: Option<Vec<PatchLocator>>,
    pub seed: u64,
    pub provenance: String,
}

impl DatasetManifest {
    pub fn new(split: Split, patients: Vec<PatientEntry>, seed: u64, provenance: impl Into<String>) -> Result<Self> {
        let m = Self {
            split,
            patients,
            patch_index: None,
            seed,
            provenance: provenance.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.patients {
            if !seen.insert(p.patient_id.as_str()) {
                return Err(Error::validation(format!("duplicate patient_id `{}` in manifest", p.patient_id)));
            }
        }
        if let Some(index) = &self.patch_index {
            for loc in index {
                if !seen.contains(loc.patient_id.as_str()) {
                    return Err(Error::validation(format!(
                        "patch_index references unknown patient `{}`",
                        loc.patient_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn patient_ids(&self) -> HashSet<&str> {
        self.patients.iter().map(|p| p.patient_id.as_str()).collect()
    }

    pub fn count_label(&self, label: PatientLabel) -> usize {
        self.patients.iter().filter(|p| p.patient_label == label).count()
    }

    /// Copy restricted to the given patients (patch index filtered too).
    pub fn subset(&self, split: Split, ids: &[&str]) -> Result<Self> {
        let wanted: HashSet<&str> = ids.iter().copied().collect();
        let patients = ids
            .iter()
            .map(|id| {
                self.patients
                    .iter()
                    .find(|p| p.patient_id == *id)
                    .cloned()
                    .ok_or_else(|| Error::validation(format!("unknown patient `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let patch_index = self.patch_index.as_ref().map(|idx| {
            idx.iter()
                .filter(|l| wanted.contains(l.patient_id.as_str()))
                .cloned()
                .collect()
        });
        let m = Self {
            split,
            patients,
            patch_index,
            seed: self.seed,
            provenance: self.provenance.clone(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Reads a manifest and resolves relative image/mask paths against the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut m.patients {
            if p.image.is_relative() {
                p.image = base.join(&p.image);
            }
            if let Some(mask) = &mut p.mask {
                if mask.is_relative() {
                    *mask = base.join(&*mask);
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Checks patient-level disjointness across the manifests of one experiment:
/// fine-tune validation must not overlap fine-tune training, and test must
/// not overlap any training split. SSL training may contain fine-tune
/// patients.
pub fn check_disjoint(manifests: &[&DatasetManifest]) -> Result<()> {
    let ids_of = |split: Split| -> HashSet<&str> {
        manifests
            .iter()
            .filter(|m| m.split == split)
            .flat_map(|m| m.patients.iter().map(|p| p.patient_id.as_str()))
            .collect()
    };
    let ssl = ids_of(Split::SslTrain);
    let train = ids_of(Split::FinetuneTrain);
    let val = ids_of(Split::FinetuneVal);
    let test = ids_of(Split::Test);
    if let Some(id) = val.intersection(&train).next() {
        return Err(Error::validation(format!("patient `{id}` is in both finetune_train and finetune_val")));
    }
    for (name, set) in [("ssl_train", &ssl), ("finetune_train", &train), ("finetune_val", &val)] {
        if let Some(id) = test.intersection(set).next() {
            return Err(Error::validation(format!("test patient `{id}` also appears in {name}")));
        }
    }
    Ok(())
}
