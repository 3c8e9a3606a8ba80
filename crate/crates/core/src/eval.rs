//! Confusion matrices and the metric suite over 3-class predictions.
//! Binary metrics fold one-vs-rest around a designated positive class;
//! ratios with a zero denominator are reported as absent, never as 0.

use crate::data::CLASS_COUNT;
use crate::error::{Error, Result};

/// 3x3 counts; rows are the true class, columns the predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; CLASS_COUNT]; CLASS_COUNT],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..CLASS_COUNT).map(|i| self.counts[i][i]).sum()
    }

    pub fn add(&mut self, label: u8, prediction: u8) -> Result<()> {
        if label as usize >= CLASS_COUNT || prediction as usize >= CLASS_COUNT {
            return Err(Error::invalid_argument(format!(
                "class value out of range: label {label}, prediction {prediction}"
            )));
        }
        self.counts[label as usize][prediction as usize] += 1;
        Ok(())
    }

    /// Merge counts from another shard; counting is a pure reduction, so
    /// sharded tallies sum to the sequential result.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for t in 0..CLASS_COUNT {
            for p in 0..CLASS_COUNT {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }

    /// One-vs-rest folding for a positive class: (tp, fp, fn, tn).
    pub fn fold_binary(&self, positive: usize) -> (u64, u64, u64, u64) {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        let mut tn = 0;
        for t in 0..CLASS_COUNT {
            for p in 0..CLASS_COUNT {
                let c = self.counts[t][p];
                match (t == positive, p == positive) {
                    (true, true) => tp += c,
                    (false, true) => fp += c,
                    (true, false) => fn_ += c,
                    (false, false) => tn += c,
                }
            }
        }
        (tp, fp, fn_, tn)
    }
}

/// Tally a prediction/label pairing.
pub fn confusion(predictions: &[u8], labels: &[u8]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid_argument(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        m.add(l, p)?;
    }
    Ok(m)
}

/// The metric suite: overall and balanced accuracy plus one-vs-rest
/// precision/recall/F1/Jaccard for every class. `positive_class` marks
/// which class the headline binary metrics refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    /// Unweighted mean of the defined per-class recalls.
    pub balanced_accuracy: f64,
    pub precision: [Option<f64>; CLASS_COUNT],
    pub recall: [Option<f64>; CLASS_COUNT],
    pub f1: [Option<f64>; CLASS_COUNT],
    pub jaccard: [Option<f64>; CLASS_COUNT],
    pub positive_class: usize,
}

impl MetricReport {
    pub fn positive_precision(&self) -> Option<f64> {
        self.precision[self.positive_class]
    }

    pub fn positive_recall(&self) -> Option<f64> {
        self.recall[self.positive_class]
    }

    pub fn positive_f1(&self) -> Option<f64> {
        self.f1[self.positive_class]
    }

    pub fn positive_jaccard(&self) -> Option<f64> {
        self.jaccard[self.positive_class]
    }

    /// key=value lines, one metric per line, prefixed by the model name.
    pub fn to_kv(&self, model: &str) -> String {
        let fmt = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        s.push_str(&format!("model={model}\n"));
        s.push_str(&format!("accuracy={:.6}\n", self.accuracy));
        s.push_str(&format!("balanced_accuracy={:.6}\n", self.balanced_accuracy));
        s.push_str(&format!("positive_class={}\n", self.positive_class));
        s.push_str(&format!("precision={}\n", fmt(self.positive_precision())));
        s.push_str(&format!("recall={}\n", fmt(self.positive_recall())));
        s.push_str(&format!("f1={}\n", fmt(self.positive_f1())));
        s.push_str(&format!("jaccard={}\n", fmt(self.positive_jaccard())));
        s
    }

    pub fn csv_header() -> &'static str {
        "model,accuracy,balanced_accuracy,precision,recall,f1,jaccard"
    }

    /// One CSV row keyed by model name (positive-class binary metrics).
    pub fn to_csv_row(&self, model: &str) -> String {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        format!(
            "{model},{:.6},{:.6},{},{},{},{}",
            self.accuracy,
            self.balanced_accuracy,
            fmt(self.positive_precision()),
            fmt(self.positive_recall()),
            fmt(self.positive_f1()),
            fmt(self.positive_jaccard())
        )
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Derive the metric suite from a confusion matrix.
pub fn metrics_from_confusion(m: &ConfusionMatrix, positive_class: usize) -> Result<MetricReport> {
    let total = m.total();
    if total == 0 {
        return Err(Error::invalid_argument("empty confusion matrix".to_string()));
    }
    if positive_class >= CLASS_COUNT {
        return Err(Error::invalid_argument(format!(
            "positive class {positive_class} out of range"
        )));
    }

    let mut precision = [None; CLASS_COUNT];
    let mut recall = [None; CLASS_COUNT];
    let mut f1 = [None; CLASS_COUNT];
    let mut jaccard = [None; CLASS_COUNT];
    for c in 0..CLASS_COUNT {
        let (tp, fp, fn_, _tn) = m.fold_binary(c);
        precision[c] = ratio(tp, tp + fp);
        recall[c] = ratio(tp, tp + fn_);
        f1[c] = match (tp, tp + fp + fn_) {
            (_, 0) => None,
            (tp, den) => Some(2.0 * tp as f64 / (den + tp) as f64),
        };
        jaccard[c] = ratio(tp, tp + fp + fn_);
    }

    let defined_recalls: Vec<f64> = recall.iter().flatten().copied().collect();
    let balanced_accuracy = if defined_recalls.is_empty() {
        0.0
    } else {
        defined_recalls.iter().sum::<f64>() / defined_recalls.len() as f64
    };

    Ok(MetricReport {
        accuracy: m.trace() as f64 / total as f64,
        balanced_accuracy,
        precision,
        recall,
        f1,
        jaccard,
        positive_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let labels = [0u8, 1, 2, 1, 0, 2];
        let m = confusion(&labels, &labels).unwrap();
        assert_eq!(m.trace(), 6);
        assert_eq!(m.total(), 6);
        let r = metrics_from_confusion(&m, 2).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.balanced_accuracy, 1.0);
        for c in 0..CLASS_COUNT {
            assert_eq!(r.precision[c], Some(1.0));
            assert_eq!(r.recall[c], Some(1.0));
            assert_eq!(r.f1[c], Some(1.0));
            assert_eq!(r.jaccard[c], Some(1.0));
        }
    }

    #[test]
    fn all_predicted_cloud_is_single_column() {
        let labels = [0u8, 1, 2, 0];
        let preds = [2u8, 2, 2, 2];
        let m = confusion(&preds, &labels).unwrap();
        for t in 0..CLASS_COUNT {
            for p in 0..CLASS_COUNT {
                if p == 2 {
                    continue;
                }
                assert_eq!(m.counts[t][p], 0);
            }
        }
        // Precision for classes never predicted is absent, not zero.
        let r = metrics_from_confusion(&m, 0).unwrap();
        assert_eq!(r.precision[0], None);
        assert_eq!(r.recall[0], Some(0.0));
    }

    #[test]
    fn ten_hand_listed_pairs_match_hand_tally() {
        let pairs: [(u8, u8); 10] = [
            (0, 0),
            (0, 1),
            (1, 1),
            (1, 1),
            (1, 2),
            (2, 2),
            (2, 2),
            (2, 0),
            (0, 0),
            (2, 2),
        ];
        let labels: Vec<u8> = pairs.iter().map(|(l, _)| *l).collect();
        let preds: Vec<u8> = pairs.iter().map(|(_, p)| *p).collect();
        let m = confusion(&preds, &labels).unwrap();
        let expected = [[2u64, 1, 0], [0, 2, 1], [1, 0, 3]];
        assert_eq!(m.counts, expected);
    }

    #[test]
    fn confusion_rejects_length_mismatch_and_bad_values() {
        assert!(confusion(&[0], &[0, 1]).is_err());
        assert!(confusion(&[3], &[0]).is_err());
    }

    #[test]
    fn hand_binary_case() {
        // TP=3 FP=1 FN=2 TN=4 folded around class 0:
        //   3 true 0 predicted 0; 1 other predicted 0; 2 true 0 predicted
        //   other; 4 other predicted other.
        let mut m = ConfusionMatrix::default();
        m.counts[0][0] = 3;
        m.counts[1][0] = 1;
        m.counts[0][1] = 2;
        m.counts[1][1] = 4;
        let r = metrics_from_confusion(&m, 0).unwrap();
        assert!((r.positive_precision().unwrap() - 0.75).abs() < 1e-12);
        assert!((r.positive_recall().unwrap() - 0.6).abs() < 1e-12);
        assert!((r.positive_f1().unwrap() - 2.0 / 3.0).abs() < 1e-9);
        assert!((r.positive_jaccard().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn balanced_accuracy_is_mean_of_recalls() {
        let mut m = ConfusionMatrix::default();
        m.counts = [[8, 2, 0], [1, 6, 3], [0, 0, 5]];
        let r = metrics_from_confusion(&m, 2).unwrap();
        let expect = (8.0 / 10.0 + 6.0 / 10.0 + 1.0) / 3.0;
        assert!((r.balanced_accuracy - expect).abs() < 1e-12);
    }

    #[test]
    fn jaccard_f1_identity() {
        // J = F1 / (2 - F1) for every one-vs-rest folding.
        let mut m = ConfusionMatrix::default();
        m.counts = [[5, 1, 2], [0, 7, 1], [3, 2, 9]];
        let r = metrics_from_confusion(&m, 0).unwrap();
        for c in 0..CLASS_COUNT {
            let (f1, j) = (r.f1[c].unwrap(), r.jaccard[c].unwrap());
            assert!((j - f1 / (2.0 - f1)).abs() < 1e-9);
        }
    }

    #[test]
    fn order_permutation_leaves_matrix_unchanged() {
        let labels = [0u8, 1, 2, 1, 0, 2, 2, 1];
        let preds = [0u8, 1, 1, 1, 2, 2, 0, 0];
        let forward = confusion(&preds, &labels).unwrap();
        let rev_labels: Vec<u8> = labels.iter().rev().copied().collect();
        let rev_preds: Vec<u8> = preds.iter().rev().copied().collect();
        let backward = confusion(&rev_preds, &rev_labels).unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn sharded_counting_matches_sequential() {
        let labels = [0u8, 1, 2, 1, 0, 2, 2, 1];
        let preds = [0u8, 1, 1, 1, 2, 2, 0, 0];
        let whole = confusion(&preds, &labels).unwrap();
        let mut sharded = confusion(&preds[..3], &labels[..3]).unwrap();
        sharded.merge(&confusion(&preds[3..], &labels[3..]).unwrap());
        assert_eq!(whole, sharded);
    }
}
