//! Detection and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    Ok(())
}

/// Area under the ROC curve. Tied scores count one half, so the value equals
/// `P(s+ > s-) + P(s+ = s-) / 2`.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ROC AUC needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += mid * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision `Σ_k (R_k − R_{k−1}) · P_k` over the ranking by
/// descending score, ties broken by ascending index.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 {
        return Err(Error::invalid("average precision needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] == 1 {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / pos as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MulticlassMetrics {
    pub accuracy: f64,
    /// F1 averaged over the classes present in the ground truth.
    pub macro_f1: f64,
}

pub fn multiclass_metrics(predicted: &[usize], truth: &[usize]) -> Result<MulticlassMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid("prediction and truth lengths differ"));
    }
    if truth.is_empty() {
        return Err(Error::invalid("no predictions"));
    }
    let n = truth.len();
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    let mut classes: Vec<usize> = truth.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let f1_sum: f64 = classes
        .iter()
        .map(|&c| {
            let tp = predicted.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count();
            let fp = predicted.iter().zip(truth).filter(|&(&p, &t)| p == c && t != c).count();
            let fn_ = predicted.iter().zip(truth).filter(|&(&p, &t)| p != c && t == c).count();
            if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            }
        })
        .sum();
    Ok(MulticlassMetrics {
        accuracy: correct as f64 / n as f64,
        macro_f1: f1_sum / classes.len() as f64,
    })
}

/// Affine rescale to `[0, 1]`; a constant input maps to all zeros.
pub fn min_max_normalize(scores: &mut [f64]) {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for s in scores.iter_mut() {
        *s = if span > 0.0 { (*s - lo) / span } else { 0.0 };
    }
}

/// Per-frame scores for `frames` source frames from per-step scores: frame
/// `f` takes step `min(f / stride, L − 1)`, so the last step also covers a
/// trailing partial window.
pub fn expand_to_frames(step_scores: &[f64], stride: usize, frames: usize) -> Vec<f64> {
    assert!(stride >= 1 && !step_scores.is_empty());
    (0..frames)
        .map(|f| step_scores[(f / stride).min(step_scores.len() - 1)])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn auc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / pairs
    }

    fn ap_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let total = labels.iter().filter(|&&l| l == 1).count() as f64;
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for k in 1..=order.len() {
            let tp = order[..k].iter().filter(|&&i| labels[i] == 1).count() as f64;
            let recall = tp / total;
            ap += (recall - prev_recall) * tp / k as f64;
            prev_recall = recall;
        }
        ap
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.4, 0.4], &[0, 1]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1, 0.0], &[1, 1, 0, 0]).unwrap(), 1.0);
        let n = 7;
        let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let mut labels = vec![0u8; n];
        labels[n - 1] = 1;
        assert!((average_precision(&scores, &labels).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        assert!(average_precision(&[0.3], &[0]).is_err());
    }

    #[test]
    fn multiclass_examples() {
        let m = multiclass_metrics(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
        let m = multiclass_metrics(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.accuracy, 0.5);
        // confusion matrix rows = truth, cols = predicted:
        //   [2 1 0]
        //   [0 1 1]
        //   [1 0 2]
        let truth = [0, 0, 0, 1, 1, 2, 2, 2];
        let pred = [0, 0, 1, 1, 2, 0, 2, 2];
        let m = multiclass_metrics(&pred, &truth).unwrap();
        assert_eq!(m.accuracy, 5.0 / 8.0);
        let f1 = |tp: f64, fp: f64, fn_: f64| 2.0 * tp / (2.0 * tp + fp + fn_);
        let want = (f1(2.0, 1.0, 1.0) + f1(1.0, 1.0, 1.0) + f1(2.0, 1.0, 1.0)) / 3.0;
        assert_eq!(m.macro_f1, want);
    }

    #[test]
    fn frame_expansion_covers_partial_window() {
        assert_eq!(expand_to_frames(&[0.1, 0.7], 3, 8), vec![0.1, 0.1, 0.1, 0.7, 0.7, 0.7, 0.7, 0.7]);
        assert_eq!(expand_to_frames(&[0.5], 4, 2), vec![0.5, 0.5]);
    }

    #[test]
    fn min_max_range() {
        let mut s = vec![3.0, -1.0, 1.0];
        min_max_normalize(&mut s);
        assert_eq!(s, vec![1.0, 0.0, 0.5]);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..200).prop_flat_map(|n| {
            (
                proptest::collection::vec(prop_oneof![(0u8..5).prop_map(|v| v as f64 / 4.0), -1.0f64..1.0], n),
                proptest::collection::vec(0u8..2, n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn auc_and_ap_match_oracles((scores, mut labels) in instance()) {
            labels[0] = 1;
            labels[1] = 0;
            prop_assert!((roc_auc(&scores, &labels).unwrap() - auc_oracle(&scores, &labels)).abs() < 1e-9);
            prop_assert!((average_precision(&scores, &labels).unwrap() - ap_oracle(&scores, &labels)).abs() < 1e-9);
        }

        #[test]
        fn auc_is_rank_invariant((scores, mut labels) in instance(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            labels[0] = 1;
            labels[1] = 0;
            let t: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
            prop_assert!((roc_auc(&scores, &labels).unwrap() - roc_auc(&t, &labels).unwrap()).abs() < 1e-12);
        }
    }
}
