//! Patient-level decisions from patch predictions, and cohort metrics.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::types::{PatchLabel, PatientLabel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    #[serde(rename = "count_O")]
    pub count_o: usize,
    #[serde(rename = "count_N")]
    pub count_n: usize,
    #[serde(rename = "count_P")]
    pub count_p: usize,
    /// `P̃ / (Ñ + P̃)`; `None` when no patch was predicted inside the stomach.
    pub ratio: Option<f64>,
    pub y: u8,
    /// Ground truth when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<u8>,
}

/// Tallies patch predictions and applies `y = 1 ⇔ P̃/(Ñ+P̃) ≥ σ`.
/// With no N or P predictions the patient is negative.
pub fn classify_patient(patient_id: &str, predictions: &[PatchLabel], sigma: f64) -> Result<PatientPrediction> {
    if predictions.is_empty() {
        return Err(Error::validation(format!("patient {patient_id}: no patch predictions")));
    }
    let mut counts = [0usize; 3];
    for p in predictions {
        counts[p.index()] += 1;
    }
    let [count_o, count_n, count_p] = counts;
    let inside = count_n + count_p;
    let ratio = if inside == 0 {
        warn!("patient {patient_id}: all {count_o} patches predicted outside the stomach; deciding negative");
        None
    } else {
        Some(count_p as f64 / inside as f64)
    };
    let y = ratio.is_some_and(|r| r >= sigma) as u8;
    Ok(PatientPrediction {
        patient_id: patient_id.to_string(),
        count_o,
        count_n,
        count_p,
        ratio,
        y,
        truth: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub sen: f64,
    pub spe: f64,
    pub hm: f64,
    pub sigma: f64,
    pub per_patient: Vec<PatientPrediction>,
}

/// Harmonic mean of sensitivity and specificity; 0 when both are 0.
pub fn harmonic_mean(sen: f64, spe: f64) -> f64 {
    if sen + spe == 0.0 {
        0.0
    } else {
        2.0 * sen * spe / (sen + spe)
    }
}

/// Confusion counts and Sen/Spe/HM from `(truth, y)` pairs. A rate whose
/// denominator is zero is reported as 0.
pub fn compute_metrics(pairs: &[(u8, u8)], sigma: f64) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::validation("no patients to score"));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for &(truth, y) in pairs {
        match (truth, y) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (0, 1) => fp += 1,
            (1, 0) => fn_ += 1,
            _ => return Err(Error::validation(format!("labels must be 0/1, got ({truth}, {y})"))),
        }
    }
    let rate = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let sen = rate(tp, fn_);
    let spe = rate(tn, fp);
    Ok(MetricsReport {
        tp,
        tn,
        fp,
        fn_,
        sen,
        spe,
        hm: harmonic_mean(sen, spe),
        sigma,
        per_patient: Vec::new(),
    })
}

/// Decides every patient and scores the cohort.
pub fn score_patients(patients: &[(String, PatientLabel, Vec<PatchLabel>)], sigma: f64) -> Result<MetricsReport> {
    let mut per_patient = Vec::with_capacity(patients.len());
    let mut pairs = Vec::with_capacity(patients.len());
    for (id, truth, preds) in patients {
        let mut p = classify_patient(id, preds, sigma)?;
        p.truth = Some(truth.as_u8());
        pairs.push((truth.as_u8(), p.y));
        per_patient.push(p);
    }
    let mut report = compute_metrics(&pairs, sigma)?;
    report.per_patient = per_patient;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use PatchLabel::*;

    #[test]
    fn ratio_rule() {
        let p = classify_patient("a", &[[N; 3].as_slice(), &[P; 7]].concat(), 0.5).unwrap();
        assert_eq!((p.ratio, p.y), (Some(0.7), 1));
        let p = classify_patient("a", &[[N; 5].as_slice(), &[P; 5]].concat(), 0.5).unwrap();
        assert_eq!(p.y, 1);
        let p = classify_patient("a", &[N; 10], 0.5).unwrap();
        assert_eq!(p.y, 0);
        let p = classify_patient("a", &[O; 4], 0.5).unwrap();
        assert_eq!((p.ratio, p.y), (None, 0));
        assert!(classify_patient("a", &[], 0.5).is_err());
    }

    #[test]
    fn harmonic_mean_table_values() {
        for (sen, spe, hm) in [(0.957, 0.806, 0.875), (0.964, 0.901, 0.931)] {
            assert!((harmonic_mean(sen, spe) - hm).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_denominators() {
        let r = compute_metrics(&[(0, 0), (0, 0)], 0.5).unwrap();
        assert_eq!((r.sen, r.spe, r.hm), (0.0, 1.0, 0.0));
        assert!(compute_metrics(&[], 0.5).is_err());
        assert!(compute_metrics(&[(2, 0)], 0.5).is_err());
    }

    #[test]
    fn report_json_keys() {
        let mut r = compute_metrics(&[(1, 1)], 0.5).unwrap();
        let mut p = classify_patient("x", &[P], 0.5).unwrap();
        p.truth = Some(1);
        r.per_patient.push(p);
        let v = serde_json::to_value(&r).unwrap();
        for k in ["tp", "tn", "fp", "fn", "sen", "spe", "hm", "sigma", "per_patient"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        let pp = &v["per_patient"][0];
        for k in ["patient_id", "count_O", "count_N", "count_P", "ratio", "y", "truth"] {
            assert!(pp.get(k).is_some(), "{k}");
        }
    }
}
