//! Binary classification metrics with atypical (label 1) as the positive
//! class: confusion counts, sensitivity, specificity, balanced accuracy and
//! ROC AUC in the Mann–Whitney formulation.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Probability threshold used to turn scores into hard predictions.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }
}

fn check_binary(v: &[u8]) -> Result<()> {
    match v.iter().find(|x| **x > 1) {
        Some(x) => Err(Error::LabelOutOfRange {
            label: usize::from(*x),
            classes: 2,
        }),
        None => Ok(()),
    }
}

pub fn confusion(labels: &[u8], preds: &[u8]) -> Result<ConfusionCounts> {
    if labels.len() != preds.len() {
        return Err(Error::LengthMismatch(labels.len(), preds.len()));
    }
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("confusion counts of an empty sample"));
    }
    check_binary(labels)?;
    check_binary(preds)?;
    let mut c = ConfusionCounts::default();
    for (l, p) in labels.iter().zip(preds) {
        match (l, p) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fn_ += 1,
            (_, 0) => c.tn += 1,
            _ => c.fp += 1,
        }
    }
    Ok(c)
}

/// `tp / (tp + fn)`
pub fn sensitivity(c: &ConfusionCounts) -> Result<f64> {
    let pos = c.tp + c.fn_;
    if pos == 0 {
        return Err(Error::UndefinedMetric("sensitivity without positive samples"));
    }
    Ok(c.tp as f64 / pos as f64)
}

/// `tn / (tn + fp)`
pub fn specificity(c: &ConfusionCounts) -> Result<f64> {
    let neg = c.tn + c.fp;
    if neg == 0 {
        return Err(Error::UndefinedMetric("specificity without negative samples"));
    }
    Ok(c.tn as f64 / neg as f64)
}

pub fn balanced_accuracy(c: &ConfusionCounts) -> Result<f64> {
    Ok(0.5 * (sensitivity(c)? + specificity(c)?))
}

/// Hard predictions: 1 when `score >= threshold`.
pub fn threshold_scores(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|s| u8::from(*s >= threshold)).collect()
}

/// ROC AUC as `P(score⁺ > score⁻) + ½·P(score⁺ = score⁻)`, computed from
/// mid-ranks in `O(n log n)`.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    check_binary(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("roc_auc", "scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|l| **l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ROC AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// The four leaderboard columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub balanced_accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub roc_auc: f64,
}

pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricReport> {
    let c = confusion(labels, &threshold_scores(scores, threshold))?;
    Ok(MetricReport {
        balanced_accuracy: balanced_accuracy(&c)?,
        sensitivity: sensitivity(&c)?,
        specificity: specificity(&c)?,
        roc_auc: roc_auc(scores, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, si) in scores.iter().enumerate() {
            for (j, sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[1, 0], &[1, 0]).unwrap();
        assert_eq!((c.tp, c.tn, c.fn_, c.fp), (1, 1, 0, 0));
        let c = confusion(&[1, 1, 0], &[0, 0, 0]).unwrap();
        assert_eq!((c.fn_, c.tn), (2, 1));
        assert!(confusion(&[], &[]).is_err());
        assert_eq!(confusion(&[1], &[1, 0]).unwrap_err(), Error::LengthMismatch(1, 2));
    }

    #[test]
    fn hand_computed_rates() {
        let c = ConfusionCounts { tp: 95, fn_: 5, tn: 80, fp: 20 };
        assert!((sensitivity(&c).unwrap() - 0.95).abs() < 1e-15);
        assert!((specificity(&c).unwrap() - 0.80).abs() < 1e-15);
        assert!((balanced_accuracy(&c).unwrap() - 0.875).abs() < 1e-15);
        let all_pos = confusion(&[1, 1, 0, 0], &[1, 1, 1, 1]).unwrap();
        assert_eq!(balanced_accuracy(&all_pos).unwrap(), 0.5);
        let perfect = confusion(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!(balanced_accuracy(&perfect).unwrap(), 1.0);
        let no_neg = confusion(&[1, 1], &[1, 0]).unwrap();
        assert!(matches!(balanced_accuracy(&no_neg), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.7, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise(data in prop::collection::vec((0u8..20, 0u8..2), 2..200)) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| f64::from(*s) / 20.0).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| *l).collect();
            let both = labels.contains(&0) && labels.contains(&1);
            prop_assume!(both);
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        }

        #[test]
        fn auc_monotone_invariant_and_flip(data in prop::collection::vec((0.0f64..1.0, 0u8..2), 2..100)) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let base = roc_auc(&scores, &labels).unwrap();
            let warped: Vec<f64> = scores.iter().map(|s| s * s * s + 2.0 * s).collect();
            prop_assert!((roc_auc(&warped, &labels).unwrap() - base).abs() < 1e-12);
            let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            let tie_free = sorted.windows(2).all(|w| w[0] != w[1]);
            if tie_free {
                prop_assert!((roc_auc(&scores, &flipped).unwrap() - (1.0 - base)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn evaluate_perfect() {
        let r = evaluate(&[0.9, 0.1, 0.8, 0.2], &[1, 0, 1, 0], DEFAULT_THRESHOLD).unwrap();
        assert_eq!(r.balanced_accuracy, 1.0);
        assert_eq!(r.roc_auc, 1.0);
    }
}
