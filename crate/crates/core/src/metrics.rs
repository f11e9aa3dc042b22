//! Confidence, reliability bins, expected calibration error, class bias,
//! confidence/accuracy gap and ROC analysis for OOD detection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub predicted_label: usize,
    /// Probability assigned to the predicted label.
    pub confidence: f64,
    pub true_label: Option<usize>,
}

impl Prediction {
    pub fn is_correct(&self) -> Option<bool> {
        self.true_label.map(|t| t == self.predicted_label)
    }
}

/// Argmax of each probability row (lowest index wins ties) and its value.
pub fn predictions_from_probs(probs: &Tensor, labels: Option<&[usize]>) -> Result<Vec<Prediction>> {
    if probs.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "expected a matrix, got {:?}",
            probs.shape()
        )));
    }
    if let Some(l) = labels {
        if l.len() != probs.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} rows",
                l.len(),
                probs.rows()
            )));
        }
    }
    Ok((0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (j, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = j;
                }
            }
            Prediction {
                predicted_label: best,
                confidence: row[best],
                true_label: labels.map(|l| l[i]),
            }
        })
        .collect())
}

/// Eval-mode predictions of `model` on `inputs`.
pub fn predict(
    model: &Model,
    inputs: &Tensor,
    labels: Option<&[usize]>,
) -> Result<Vec<Prediction>> {
    predictions_from_probs(&model.predict_proba(inputs)?, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean confidence (0 when empty).
    pub conf: f64,
    /// Fraction correct (0 when empty).
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub bins: Vec<Bin>,
    pub total: usize,
}

/// Bin `m` covers `(m/M, (m+1)/M]`; zero (and anything below) goes to bin 0.
pub fn bin_index(confidence: f64, num_bins: usize) -> usize {
    let m = num_bins as f64;
    let mut idx = ((confidence * m).ceil() as isize - 1).clamp(0, num_bins as isize - 1) as usize;
    // correct for rounding in `confidence * m` against the exact edges
    while idx > 0 && confidence <= idx as f64 / m {
        idx -= 1;
    }
    while idx + 1 < num_bins && confidence > (idx + 1) as f64 / m {
        idx += 1;
    }
    idx
}

pub fn reliability(preds: &[Prediction], num_bins: usize) -> Result<CalibrationBins> {
    if num_bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions to bin".into()));
    }
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    let mut correct = vec![0usize; num_bins];
    for (i, p) in preds.iter().enumerate() {
        let ok = p
            .is_correct()
            .ok_or_else(|| Error::InvalidArgument(format!("prediction {i} has no true label")))?;
        let b = bin_index(p.confidence, num_bins);
        count[b] += 1;
        conf_sum[b] += p.confidence;
        correct[b] += usize::from(ok);
    }
    let m = num_bins as f64;
    let bins = (0..num_bins)
        .map(|b| {
            let n = count[b];
            Bin {
                lo: b as f64 / m,
                hi: (b + 1) as f64 / m,
                count: n,
                conf: if n > 0 { conf_sum[b] / n as f64 } else { 0.0 },
                acc: if n > 0 {
                    correct[b] as f64 / n as f64
                } else {
                    0.0
                },
            }
        })
        .collect();
    Ok(CalibrationBins {
        bins,
        total: preds.len(),
    })
}

/// `Σ_m (B_m / N) · |acc(B_m) − conf(B_m)|`
pub fn ece(bins: &CalibrationBins) -> f64 {
    let n = bins.total as f64;
    bins.bins
        .iter()
        .map(|b| (b.count as f64 / n) * (b.acc - b.conf).abs())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBiasReport {
    pub counts: Vec<usize>,
    pub ratios: Vec<f64>,
    /// Population standard deviation of `ratios`.
    pub bias: f64,
}

pub fn class_bias(preds: &[Prediction], num_classes: usize) -> Result<ClassBiasReport> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    if num_classes == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    let mut counts = vec![0usize; num_classes];
    for p in preds {
        let slot = counts.get_mut(p.predicted_label).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "predicted label {} ≥ {num_classes}",
                p.predicted_label
            ))
        })?;
        *slot += 1;
    }
    let total = preds.len() as f64;
    let ratios: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    let k = num_classes as f64;
    let mean = ratios.iter().sum::<f64>() / k;
    let bias = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k).sqrt();
    Ok(ClassBiasReport {
        counts,
        ratios,
        bias,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceStats {
    pub mean_confidence: f64,
    pub accuracy: f64,
    /// `mean_confidence − accuracy`; positive means overconfident.
    pub gap: f64,
}

pub fn confidence_stats(preds: &[Prediction]) -> Result<ConfidenceStats> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let n = preds.len() as f64;
    let mut conf = 0.0;
    let mut correct = 0usize;
    for (i, p) in preds.iter().enumerate() {
        conf += p.confidence;
        correct +=
            usize::from(p.is_correct().ok_or_else(|| {
                Error::InvalidArgument(format!("prediction {i} has no true label"))
            })?);
    }
    let mean_confidence = conf / n;
    let accuracy = correct as f64 / n;
    Ok(ConfidenceStats {
        mean_confidence,
        accuracy,
        gap: mean_confidence - accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Samples with confidence ≥ threshold are called in-distribution.
    /// `None` for the initial point where nothing is called positive.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    /// Mann–Whitney estimate `P(id > ood) + ½·P(id = ood)`.
    pub auroc: f64,
}

impl RocCurve {
    /// Trapezoidal area under the emitted points.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }
}

/// ROC curve with in-distribution samples as the positive class.
pub fn roc_auroc(id_confidences: &[f64], ood_confidences: &[f64]) -> Result<RocCurve> {
    if id_confidences.is_empty() || ood_confidences.is_empty() {
        return Err(Error::InvalidArgument(
            "ROC needs both ID and OOD samples".into(),
        ));
    }
    if id_confidences
        .iter()
        .chain(ood_confidences)
        .any(|v| !v.is_finite())
    {
        return Err(Error::InvalidArgument("non-finite confidence".into()));
    }
    let (n_id, n_ood) = (id_confidences.len(), ood_confidences.len());
    let mut all: Vec<(f64, bool)> = id_confidences
        .iter()
        .map(|&c| (c, true))
        .chain(ood_confidences.iter().map(|&c| (c, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: None,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    // 2·#(id > ood) + #(id = ood)
    let mut u2 = 0u128;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        let (mut gid, mut good) = (0usize, 0usize);
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                gid += 1;
            } else {
                good += 1;
            }
            i += 1;
        }
        // OOD samples in this group lose to every ID sample already seen and
        // tie with the ID samples of the group.
        u2 += (good as u128) * (2 * tp as u128 + gid as u128);
        tp += gid;
        fp += good;
        points.push(RocPoint {
            fpr: fp as f64 / n_ood as f64,
            tpr: tp as f64 / n_id as f64,
            threshold: Some(t),
        });
    }
    let pairs = (n_id as u128) * (n_ood as u128);
    let auroc = u2 as f64 / (2.0 * pairs as f64);
    Ok(RocCurve { points, auroc })
}

/// Metrics emitted as JSON by every evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ece: f64,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub gap: f64,
    pub class_bias: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auroc: Option<f64>,
    pub bins: Vec<Bin>,
}

/// All labelled-prediction metrics at once.
pub fn evaluate(
    preds: &[Prediction],
    num_classes: usize,
    num_bins: usize,
) -> Result<MetricsReport> {
    let bins = reliability(preds, num_bins)?;
    let stats = confidence_stats(preds)?;
    Ok(MetricsReport {
        ece: ece(&bins),
        mean_confidence: stats.mean_confidence,
        accuracy: stats.accuracy,
        gap: stats.gap,
        class_bias: class_bias(preds, num_classes)?.bias,
        auroc: None,
        bins: bins.bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(conf: &[f64], correct: &[bool]) -> Vec<Prediction> {
        conf.iter()
            .zip(correct)
            .map(|(&c, &ok)| Prediction {
                predicted_label: 0,
                confidence: c,
                true_label: Some(if ok { 0 } else { 1 }),
            })
            .collect()
    }

    #[test]
    fn argmax_tie_breaks_low() {
        let p = Tensor::filled(&[1, 10], 0.1);
        let preds = predictions_from_probs(&p, None).unwrap();
        assert_eq!(preds[0].predicted_label, 0);
        assert!((preds[0].confidence - 0.1).abs() < 1e-15);
        let mut onehot = Tensor::zeros(&[1, 4]);
        onehot.data_mut()[2] = 1.0;
        let preds = predictions_from_probs(&onehot, None).unwrap();
        assert_eq!((preds[0].predicted_label, preds[0].confidence), (2, 1.0));
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.3, 10), 2);
        assert_eq!(bin_index(0.30000000000000004, 10), 3);
        assert_eq!(bin_index(0.7, 10), 6);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.55, 10), 5);
        for m in 1..=20 {
            for b in 0..m {
                let edge = (b + 1) as f64 / m as f64;
                assert_eq!(bin_index(edge, m), b, "edge {edge} with {m} bins");
            }
        }
    }

    #[test]
    fn all_correct_at_full_confidence() {
        let bins = reliability(&labelled(&[1.0; 5], &[true; 5]), 10).unwrap();
        let occupied: Vec<&Bin> = bins.bins.iter().filter(|b| b.count > 0).collect();
        assert_eq!(occupied.len(), 1);
        assert_eq!(
            (occupied[0].acc, occupied[0].conf, occupied[0].hi),
            (1.0, 1.0, 1.0)
        );
        assert_eq!(ece(&bins), 0.0);
    }

    #[test]
    fn four_sample_hand_case() {
        let preds = labelled(&[0.95, 0.85, 0.65, 0.55], &[true, false, true, false]);
        let bins = reliability(&preds, 10).unwrap();
        let occupied: Vec<(f64, f64)> = bins
            .bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| (b.acc, b.conf))
            .collect();
        assert_eq!(
            occupied,
            vec![(0.0, 0.55), (1.0, 0.65), (0.0, 0.85), (1.0, 0.95)]
        );
        assert_eq!(bins.bins.iter().map(|b| b.count).sum::<usize>(), 4);
        assert!((ece(&bins) - 0.45).abs() < 1e-15);
    }

    #[test]
    fn reliability_errors() {
        assert!(reliability(&[], 10).is_err());
        let unlabelled = [Prediction {
            predicted_label: 0,
            confidence: 0.5,
            true_label: None,
        }];
        assert!(reliability(&unlabelled, 10).is_err());
        assert!(reliability(&labelled(&[0.5], &[true]), 0).is_err());
    }

    #[test]
    fn class_bias_cases() {
        let mk = |labels: &[usize]| -> Vec<Prediction> {
            labels
                .iter()
                .map(|&l| Prediction {
                    predicted_label: l,
                    confidence: 1.0,
                    true_label: None,
                })
                .collect()
        };
        let uniform: Vec<usize> = (0..100).map(|i| i % 10).collect();
        assert!(class_bias(&mk(&uniform), 10).unwrap().bias < 1e-15);
        let r = class_bias(&mk(&[3; 50]), 10).unwrap();
        assert!((r.bias - 0.3).abs() < 1e-12);
        assert_eq!(r.ratios[3], 1.0);
        let r = class_bias(&mk(&[0, 0, 0, 0, 0, 0, 1, 1, 1, 1]), 2).unwrap();
        assert!((r.bias - 0.1).abs() < 1e-12);
        assert!((r.ratios.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn confidence_gap_cases() {
        let s = confidence_stats(&labelled(&[1.0, 1.0], &[true, true])).unwrap();
        assert_eq!(s.gap, 0.0);
        let s = confidence_stats(&labelled(&[1.0, 1.0], &[false, false])).unwrap();
        assert_eq!(s.gap, 1.0);
        let s = confidence_stats(&labelled(&[0.9, 0.7], &[true, false])).unwrap();
        assert!((s.mean_confidence - 0.8).abs() < 1e-15);
        assert_eq!(s.accuracy, 0.5);
        assert!((s.gap - 0.3).abs() < 1e-15);
    }

    #[test]
    fn roc_cases() {
        let r = roc_auroc(&[0.9, 0.4], &[0.8, 0.3]).unwrap();
        assert_eq!(r.auroc, 0.75);
        assert_eq!(roc_auroc(&[0.9, 0.8], &[0.2, 0.1]).unwrap().auroc, 1.0);
        let same = [0.3, 0.5, 0.5, 0.9];
        assert_eq!(roc_auroc(&same, &same).unwrap().auroc, 0.5);
        assert!(roc_auroc(&[], &[0.1]).is_err());
        let first = r.points.first().unwrap();
        let last = r.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!((r.trapezoid_area() - r.auroc).abs() < 1e-12);
    }

    #[test]
    fn report_json_schema() {
        let preds = labelled(&[0.95, 0.85, 0.65, 0.55], &[true, false, true, false]);
        let report = evaluate(&preds, 2, 10).unwrap();
        let v = serde_json::to_value(&report).unwrap();
        for key in [
            "ece",
            "mean_confidence",
            "accuracy",
            "gap",
            "class_bias",
            "bins",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v.get("auroc").is_none());
        let bin = &v["bins"][9];
        for key in ["lo", "hi", "count", "conf", "acc"] {
            assert!(bin.get(key).is_some());
        }
    }
}
