//! Fine-tune / validation partition of the labelled pool and the nested
//! few-shot subsets.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::manifest::{DatasetManifest, Split};
use crate::rng::{rng_for, stream};
use crate::types::PatientLabel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub fewshot_grid: Vec<usize>,
}

impl Default for SplitPlan {
    /// 120 fine-tune / 80 validation patients, few-shot 10/20/30/40.
    fn default() -> Self {
        Self {
            train_per_class: 60,
            val_per_class: 40,
            fewshot_grid: vec![10, 20, 30, 40],
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneSets {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    /// Keyed by labelled-patient count; each set contains the smaller ones.
    pub fewshot: BTreeMap<usize, DatasetManifest>,
}

/// Stratified split of `pool`: per class, a seeded shuffle whose first
/// `val_per_class` ids go to validation and the next `train_per_class` to
/// fine-tune training. Few-shot set `k` takes the first `k/2` training ids
/// of each class in shuffled order, so smaller sets nest in larger ones.
pub fn build_finetune_sets(pool: &DatasetManifest, seed: u64, plan: &SplitPlan) -> Result<FinetuneSets> {
    for &k in &plan.fewshot_grid {
        if k == 0 || k % 2 != 0 || k / 2 > plan.train_per_class {
            return Err(Error::validation(format!(
                "few-shot size {k} must be even, positive and at most {}",
                2 * plan.train_per_class
            )));
        }
    }
    let need = plan.train_per_class + plan.val_per_class;
    let mut by_class = Vec::new();
    for (tag, label) in [(0u64, PatientLabel::Negative), (1, PatientLabel::Positive)] {
        let mut ids: Vec<&str> = pool
            .patients
            .iter()
            .filter(|p| p.patient_label == label)
            .map(|p| p.patient_id.as_str())
            .collect();
        if ids.len() < need {
            return Err(Error::validation(format!(
                "pool has {} {label:?} patients, need {need}",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng_for(seed, &[stream::SPLIT, tag]));
        by_class.push(ids);
    }
    let take = |range: std::ops::Range<usize>| -> Vec<&str> {
        // Interleave classes so every prefix stays balanced.
        range.flat_map(|i| [by_class[1][i], by_class[0][i]]).collect()
    };
    let val = pool.subset(Split::FinetuneVal, &take(0..plan.val_per_class))?;
    let train_ids = take(plan.val_per_class..need);
    let train = pool.subset(Split::FinetuneTrain, &train_ids)?;
    let mut fewshot = BTreeMap::new();
    for &k in &plan.fewshot_grid {
        fewshot.insert(k, pool.subset(Split::FinetuneTrain, &train_ids[..k])?);
    }
    Ok(FinetuneSets { train, val, fewshot })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::PatientEntry;

    fn pool(n: usize) -> DatasetManifest {
        let patients = (0..n)
            .map(|i| PatientEntry {
                patient_id: format!("p{i}"),
                patient_label: if i % 2 == 0 {
                    PatientLabel::Positive
                } else {
                    PatientLabel::Negative
                },
                image: format!("p{i}.png").into(),
                mask: None,
            })
            .collect();
        DatasetManifest::new(Split::SslTrain, patients, 0, "test").unwrap()
    }

    #[test]
    fn paper_partition_shape() {
        let sets = build_finetune_sets(&pool(200), 5, &SplitPlan::default()).unwrap();
        assert_eq!(sets.train.patients.len(), 120);
        assert_eq!(sets.val.count_label(PatientLabel::Positive), 40);
        assert_eq!(sets.val.count_label(PatientLabel::Negative), 40);
        crate::manifest::check_disjoint(&[&sets.train, &sets.val]).unwrap();
        let mut prev: Option<&DatasetManifest> = None;
        for (k, m) in &sets.fewshot {
            assert_eq!(m.patients.len(), *k);
            assert_eq!(m.count_label(PatientLabel::Positive), k / 2);
            if let Some(p) = prev {
                assert!(p.patient_ids().is_subset(&m.patient_ids()));
            }
            prev = Some(m);
        }
    }

    #[test]
    fn too_small_pool() {
        assert!(matches!(
            build_finetune_sets(&pool(150), 1, &SplitPlan::default()),
            Err(Error::Validation(_))
        ));
    }
}
