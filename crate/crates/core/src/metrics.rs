//! Utility distortion and defense-effectiveness measures.

use serde::{Deserialize, Serialize};

use crate::data::Norm;
use crate::error::{Error, Result};
use crate::models::ConfidenceVector;

/// One query's output before and after the defense.
#[derive(Clone, Debug, PartialEq)]
pub struct DistortionPair {
    pub original: ConfidenceVector,
    pub smoothed: ConfidenceVector,
    /// `argmax(original)` with lowest-index ties.
    pub predicted_label: usize,
    pub fallback: bool,
}

impl DistortionPair {
    pub fn new(original: ConfidenceVector, smoothed: ConfidenceVector) -> Self {
        let predicted_label = original.argmax();
        Self {
            original,
            smoothed,
            predicted_label,
            fallback: false,
        }
    }
}

fn non_empty(pairs: &[DistortionPair]) -> Result<()> {
    if pairs.is_empty() {
        Err(Error::Empty("distortion pairs"))
    } else {
        Ok(())
    }
}

/// Mean `|original[y] - smoothed[y]|` at the original predicted label.
pub fn pcd(pairs: &[DistortionPair]) -> Result<f64> {
    non_empty(pairs)?;
    let total: f64 = pairs
        .iter()
        .map(|p| (p.original.get(p.predicted_label) - p.smoothed.get(p.predicted_label)).abs())
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Mean Euclidean distance between original and smoothed vectors.
pub fn cvd(pairs: &[DistortionPair]) -> Result<f64> {
    non_empty(pairs)?;
    let mut total = 0.0;
    for p in pairs {
        if p.original.len() != p.smoothed.len() {
            return Err(Error::DimensionMismatch {
                expected: p.original.len(),
                actual: p.smoothed.len(),
            });
        }
        total += Norm::L2.distance(p.original.probs(), p.smoothed.probs());
    }
    Ok(total / pairs.len() as f64)
}

/// Fraction of queries whose released label differs from the original one.
pub fn label_loss_rate(pairs: &[DistortionPair]) -> Result<f64> {
    non_empty(pairs)?;
    let lost = pairs
        .iter()
        .filter(|p| p.smoothed.argmax() != p.predicted_label)
        .count();
    Ok(lost as f64 / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub pcd: f64,
    pub cvd: f64,
    pub label_loss_rate: f64,
    pub n_queries: usize,
    pub fallback_rate: f64,
}

/// PCD and CVD average over non-fallback queries only (zero when every
/// query fell back); label loss and fallback rate cover all queries.
pub fn distortion_report(pairs: &[DistortionPair]) -> Result<DistortionReport> {
    non_empty(pairs)?;
    let regular: Vec<DistortionPair> = pairs.iter().filter(|p| !p.fallback).cloned().collect();
    let (pcd, cvd) = if regular.is_empty() {
        (0.0, 0.0)
    } else {
        (pcd(&regular)?, cvd(&regular)?)
    };
    Ok(DistortionReport {
        pcd,
        cvd,
        label_loss_rate: label_loss_rate(pairs)?,
        n_queries: pairs.len(),
        fallback_rate: (pairs.len() - regular.len()) as f64 / pairs.len() as f64,
    })
}

/// Signed drop in attack accuracy; negative when the defense helped the attacker.
pub fn accuracy_drop(no_defense: f64, with_defense: f64) -> f64 {
    no_defense - with_defense
}

/// Pearson correlation, `None` when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// One (dataset, model, attack) measurement with and without the defense.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub dataset: String,
    pub model: String,
    pub attack: String,
    pub acc_no_def: f64,
    pub acc_def: f64,
    pub distortion: DistortionReport,
    pub seed: u64,
}

impl ExperimentCell {
    pub fn accuracy_drop(&self) -> f64 {
        accuracy_drop(self.acc_no_def, self.acc_def)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub model: String,
    pub dataset: String,
    pub attack: String,
    pub accuracy_drop: f64,
    pub cvd: f64,
    pub pcd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub rows: Vec<CorrelationRow>,
    /// Pearson r between accuracy drop and CVD; `None` when undefined.
    pub drop_cvd_pearson: Option<f64>,
}

pub fn correlation_table(cells: &[ExperimentCell]) -> Result<CorrelationTable> {
    if cells.is_empty() {
        return Err(Error::Empty("experiment cells"));
    }
    let rows: Vec<CorrelationRow> = cells
        .iter()
        .map(|c| CorrelationRow {
            model: c.model.clone(),
            dataset: c.dataset.clone(),
            attack: c.attack.clone(),
            accuracy_drop: c.accuracy_drop(),
            cvd: c.distortion.cvd,
            pcd: c.distortion.pcd,
        })
        .collect();
    let drops: Vec<f64> = rows.iter().map(|r| r.accuracy_drop).collect();
    let cvds: Vec<f64> = rows.iter().map(|r| r.cvd).collect();
    Ok(CorrelationTable {
        drop_cvd_pearson: pearson(&drops, &cvds),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cv(p: &[f64]) -> ConfidenceVector {
        ConfidenceVector::new(p.to_vec()).unwrap()
    }

    fn pair(a: &[f64], b: &[f64]) -> DistortionPair {
        DistortionPair::new(cv(a), cv(b))
    }

    fn cell(drop: f64, cvd: f64) -> ExperimentCell {
        ExperimentCell {
            dataset: "d".into(),
            model: "m".into(),
            attack: "a".into(),
            acc_no_def: 0.5 + drop,
            acc_def: 0.5,
            distortion: DistortionReport {
                pcd: cvd / 2.0,
                cvd,
                label_loss_rate: 0.0,
                n_queries: 10,
                fallback_rate: 0.0,
            },
            seed: 0,
        }
    }

    #[test]
    fn hand_computed_distortions() {
        let p = [pair(&[0.9, 0.1], &[0.7, 0.3])];
        assert!((pcd(&p).unwrap() - 0.2).abs() < 1e-12);
        assert!((cvd(&p).unwrap() - 0.08f64.sqrt()).abs() < 1e-12);
        assert!((cvd(&[pair(&[1.0, 0.0], &[0.0, 1.0])]).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let same = [pair(&[0.3, 0.7], &[0.3, 0.7])];
        assert_eq!((pcd(&same).unwrap(), cvd(&same).unwrap()), (0.0, 0.0));
        assert!(pcd(&[]).is_err() && cvd(&[]).is_err() && label_loss_rate(&[]).is_err());
        let mismatch = [pair(&[0.5, 0.5], &[0.2, 0.3, 0.5])];
        assert!(cvd(&mismatch).is_err());
    }

    #[test]
    fn label_loss_detection() {
        assert_eq!(label_loss_rate(&[pair(&[0.6, 0.4], &[0.4, 0.6])]).unwrap(), 1.0);
        let batch = [pair(&[0.6, 0.4], &[0.4, 0.6]), pair(&[0.6, 0.4], &[0.55, 0.45])];
        assert_eq!(label_loss_rate(&batch).unwrap(), 0.5);
    }

    #[test]
    fn fallback_excluded_from_distortion() {
        let mut flagged = pair(&[0.9, 0.1], &[0.5, 0.5]);
        flagged.fallback = true;
        let report = distortion_report(&[flagged, pair(&[0.9, 0.1], &[0.7, 0.3])]).unwrap();
        assert!((report.pcd - 0.2).abs() < 1e-12);
        assert_eq!(report.fallback_rate, 0.5);
        assert_eq!(report.n_queries, 2);
    }

    #[test]
    fn accuracy_drops() {
        assert!((accuracy_drop(0.9791, 0.5126) - 0.4665).abs() < 1e-12);
        assert!((accuracy_drop(0.4989, 0.5020) + 0.0031).abs() < 1e-12);
        assert_eq!(accuracy_drop(0.6, 0.6), 0.0);
    }

    #[test]
    fn correlation_cases() {
        let flat = correlation_table(&[cell(0.0, 0.0), cell(0.0, 0.0)]).unwrap();
        assert_eq!(flat.drop_cvd_pearson, None);
        let proportional = correlation_table(&[cell(0.1, 0.05), cell(0.2, 0.1), cell(0.4, 0.2)]).unwrap();
        assert!((proportional.drop_cvd_pearson.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(proportional.rows.len(), 3);
        assert!(correlation_table(&[]).is_err());
    }

    fn simplex(c: usize) -> impl Strategy<Value = ConfidenceVector> {
        prop::collection::vec(0.01f64..1.0, c).prop_map(|w| {
            let total: f64 = w.iter().sum();
            ConfidenceVector::new(w.iter().map(|x| x / total).collect::<Vec<_>>())
                .unwrap_or_else(|_| ConfidenceVector::uniform(w.len()))
        })
    }

    proptest! {
        #[test]
        fn metrics_are_bounded_and_order_free(
            pairs in prop::collection::vec((simplex(4), simplex(4)), 1..20)
        ) {
            let mut items: Vec<DistortionPair> =
                pairs.into_iter().map(|(a, b)| DistortionPair::new(a, b)).collect();
            let (p, c) = (pcd(&items).unwrap(), cvd(&items).unwrap());
            prop_assert!(p >= 0.0 && c >= 0.0 && c <= 2f64.sqrt() + 1e-12);
            items.reverse();
            prop_assert!((pcd(&items).unwrap() - p).abs() < 1e-12);
            prop_assert!((cvd(&items).unwrap() - c).abs() < 1e-12);
        }
    }
}
