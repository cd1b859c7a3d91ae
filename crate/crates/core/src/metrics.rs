//! Classification metrics: confusion matrix, precision/recall/F1 and
//! one-vs-rest AUROC.

use std::cmp::Ordering;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{truth} true labels but {pred} predictions")]
    Length { truth: usize, pred: usize },
    #[error("no samples")]
    Empty,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("probability row {row} sums to {sum}, expected 1")]
    NotNormalised { row: usize, sum: f64 },
    #[error("no class has both positive and negative samples")]
    NoScorableClass,
}

/// `counts[t][p]` = number of samples with true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        Self { counts }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::Length { truth: truth.len(), pred: predicted.len() });
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes || p >= classes {
            return Err(MetricsError::Label { label: t.max(p), classes });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prf1Report {
    pub per_class: Vec<ClassScores>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

impl Prf1Report {
    /// For single-label data micro precision, recall and F1 all equal the
    /// accuracy.
    pub fn f1(&self, averaging: Averaging) -> f64 {
        match averaging {
            Averaging::Macro => self.macro_f1,
            Averaging::Micro => self.accuracy,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision/recall/F1 with macro means. A class never predicted
/// has precision 0, a class never present has recall 0, and F1 is 0 when
/// precision + recall is 0.
pub fn prf1(cm: &ConfusionMatrix) -> Prf1Report {
    let k = cm.classes();
    let per_class: Vec<ClassScores> = (0..k)
        .map(|c| {
            let tp = cm.count(c, c);
            let predicted: u64 = (0..k).map(|t| cm.count(t, c)).sum();
            let actual: u64 = cm.counts[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            ClassScores { precision, recall, f1 }
        })
        .collect();
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Prf1Report {
        macro_precision: mean(|s| s.precision),
        macro_recall: mean(|s| s.recall),
        macro_f1: mean(|s| s.f1),
        accuracy: cm.accuracy(),
        per_class,
    }
}

/// Binary AUC: probability a random positive outranks a random negative,
/// ties counted half. Uses the Mann–Whitney rank-sum with midranks.
/// Returns `None` when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share the midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        pos_rank_sum += midrank * order[i..j].iter().filter(|&&s| positive[s]).count() as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One-vs-rest AUC per class; `None` for classes absent from `truth` (or
/// covering every sample).
pub fn auroc_ovr(truth: &[usize], probs: &Matrix) -> Result<Vec<Option<f64>>, MetricsError> {
    if truth.len() != probs.rows() {
        return Err(MetricsError::Length { truth: truth.len(), pred: probs.rows() });
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (r, row) in probs.iter_rows().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MetricsError::NotNormalised { row: r, sum });
        }
    }
    let k = probs.cols();
    if let Some(&bad) = truth.iter().find(|&&t| t >= k) {
        return Err(MetricsError::Label { label: bad, classes: k });
    }
    Ok((0..k)
        .map(|c| {
            let scores: Vec<f64> = probs.iter_rows().map(|r| r[c]).collect();
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            binary_auc(&scores, &positive)
        })
        .collect())
}

/// Macro mean of the one-vs-rest AUCs over the classes that can be scored.
pub fn auroc_ovr_macro(truth: &[usize], probs: &Matrix) -> Result<f64, MetricsError> {
    let per_class = auroc_ovr(truth, probs)?;
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    if scored.len() < per_class.len() {
        let missing: Vec<usize> = (0..per_class.len()).filter(|&c| per_class[c].is_none()).collect();
        warn!("AUROC: classes {missing:?} lack positives or negatives and are excluded from the macro mean");
    }
    if scored.is_empty() {
        return Err(MetricsError::NoScorableClass);
    }
    Ok(scored.iter().sum::<f64>() / scored.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let y = [0, 1, 2, 2, 1];
        let cm = confusion(&y, &y, 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                if t != p {
                    assert_eq!(cm.count(t, p), 0);
                }
            }
        }
        let r = prf1(&cm);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert!(r.per_class.iter().all(|s| s.precision == 1.0 && s.recall == 1.0));
    }

    #[test]
    fn constant_prediction_fills_one_column() {
        let cm = confusion(&[0, 1, 2, 1], &[0, 0, 0, 0], 3).unwrap();
        assert_eq!(cm.counts(), &[vec![1, 0, 0], vec![2, 0, 0], vec![1, 0, 0]]);
        let r = prf1(&cm);
        assert_eq!(r.per_class[1].precision, 0.0);
        assert_eq!(r.per_class[1].f1, 0.0);
    }

    #[test]
    fn two_class_reduction() {
        let cm = ConfusionMatrix::from_counts(vec![vec![5, 5], vec![0, 10]]);
        let r = prf1(&cm);
        assert_eq!(r.per_class[0].recall, 0.5);
        assert_eq!(r.per_class[0].precision, 1.0);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.macro_f1, (r.per_class[0].f1 + r.per_class[1].f1) / 2.0);
        assert_eq!(r.accuracy, 0.75);
    }

    #[test]
    fn absent_class_has_zero_recall() {
        let cm = confusion(&[0, 0, 1], &[0, 2, 1], 3).unwrap();
        let r = prf1(&cm);
        assert_eq!(r.per_class[2].recall, 0.0);
        assert_eq!(r.per_class[2].precision, 0.0);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(confusion(&[0, 1], &[0], 3), Err(MetricsError::Length { .. })));
    }

    #[test]
    fn auc_perfect_and_tied() {
        assert_eq!(binary_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(binary_auc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(binary_auc(&[0.5; 2], &[true, true]), None);
    }

    #[test]
    fn uniform_probabilities_score_one_half() {
        let probs = Matrix::from_vec(3, vec![1.0 / 3.0; 18]).unwrap();
        let y = [0, 1, 2, 0, 1, 2];
        assert_eq!(auroc_ovr(&y, &probs).unwrap(), vec![Some(0.5); 3]);
        assert!((auroc_ovr_macro(&y, &probs).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_excluded_from_macro_mean() {
        let probs = Matrix::from_vec(3, vec![0.8, 0.1, 0.1, 0.1, 0.8, 0.1]).unwrap();
        let per = auroc_ovr(&[0, 1], &probs).unwrap();
        assert_eq!(per, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(auroc_ovr_macro(&[0, 1], &probs).unwrap(), 1.0);
    }

    #[test]
    fn unnormalised_rows_are_rejected() {
        let probs = Matrix::from_vec(3, vec![0.5, 0.5, 0.5]).unwrap();
        assert!(matches!(auroc_ovr(&[0], &probs), Err(MetricsError::NotNormalised { .. })));
    }
}
