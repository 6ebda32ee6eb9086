use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphio::Labels;
use crate::numerics::{ops, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Accuracy,
    RocAuc,
    Des,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Accuracy => "accuracy",
            MetricName::RocAuc => "roc_auc",
            MetricName::Des => "des",
        }
    }

    /// Accuracy for multiclass targets, ROC AUC for binary and multilabel.
    pub fn for_labels(labels: &Labels, num_classes: usize) -> Self {
        match labels {
            Labels::Classes(_) if num_classes > 2 => MetricName::Accuracy,
            _ => MetricName::RocAuc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    OodTest,
    All,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::OodTest => "ood_test",
            SplitTag::All => "all",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: MetricName,
    pub value: f64,
    pub split: SplitTag,
    pub n_evaluated: usize,
}

fn nonempty(mask: &[usize], what: &str) -> Result<()> {
    if mask.is_empty() {
        return Err(Error::Contract(format!("{what} needs a nonempty mask")));
    }
    Ok(())
}

/// Fraction of rows in `mask` whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize], mask: &[usize], split: SplitTag) -> Result<MetricReport> {
    nonempty(mask, "accuracy")?;
    let correct = mask.iter().filter(|&&i| logits.row_argmax(i) == labels[i]).count();
    Ok(MetricReport {
        name: MetricName::Accuracy,
        value: correct as f64 / mask.len() as f64,
        split,
        n_evaluated: mask.len(),
    })
}

/// Mann–Whitney ROC AUC with half credit for ties, computed from midranks.
pub fn roc_auc(scores: &[f64], labels: &[bool], mask: &[usize], split: SplitTag) -> Result<MetricReport> {
    nonempty(mask, "roc_auc")?;
    let mut items: Vec<(f64, bool)> = mask.iter().map(|&i| (scores[i], labels[i])).collect();
    let pos = items.iter().filter(|x| x.1).count();
    let neg = items.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "roc_auc needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < items.len() {
        let mut end = start;
        while end < items.len() && items[end].0 == items[start].0 {
            end += 1;
        }
        // Ranks start..end (1-based start+1..=end) share their mean.
        let midrank = (start + 1 + end) as f64 / 2.0;
        rank_sum += midrank * items[start..end].iter().filter(|x| x.1).count() as f64;
        start = end;
    }
    let (p, n) = (pos as f64, neg as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(MetricReport {
        name: MetricName::RocAuc,
        value: u / (p * n),
        split,
        n_evaluated: mask.len(),
    })
}

/// Default probability threshold for the predicted DE set.
pub const DES_THRESHOLD: f64 = 0.5;

/// Overlap of the predicted DE set with the true set, normalized by the
/// true set size. `predicted` defaults to genes with probability at least
/// `threshold`; an oversized prediction is cut to the `|true|` most probable
/// genes (ties to the lower index).
pub fn des_score(probs: &[f64], true_set: &[usize], predicted: Option<&[usize]>, threshold: f64) -> Result<MetricReport> {
    if true_set.is_empty() {
        return Err(Error::Contract("des_score needs a nonempty true DE set".into()));
    }
    let mut pred: Vec<usize> = match predicted {
        Some(p) => p.to_vec(),
        None => (0..probs.len()).filter(|&i| probs[i] >= threshold).collect(),
    };
    pred.sort_unstable();
    pred.dedup();
    if pred.len() > true_set.len() {
        pred.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        pred.truncate(true_set.len());
    }
    let hits = pred.iter().filter(|g| true_set.contains(g)).count();
    Ok(MetricReport {
        name: MetricName::Des,
        value: hits as f64 / true_set.len() as f64,
        split: SplitTag::All,
        n_evaluated: true_set.len(),
    })
}

/// Positive-class score per node: softmax probability of class 1 for class
/// labels, sigmoid of column `col` for multilabel.
pub fn positive_scores(logits: &Tensor, labels: &Labels, col: usize) -> Result<Vec<f64>> {
    match labels {
        Labels::Classes(_) => {
            let p = ops::row_softmax(logits, 1.0)?;
            let c = if p.cols() > 1 { 1 } else { 0 };
            Ok((0..p.rows()).map(|i| p.get(i, c)).collect())
        }
        Labels::Multilabel(_) => Ok((0..logits.rows()).map(|i| ops::sigmoid(logits.get(i, col))).collect()),
    }
}

/// The model-selection metric on `mask`. Multilabel AUC is averaged over
/// the columns where both classes occur.
pub fn evaluate(logits: &Tensor, labels: &Labels, kind: MetricName, mask: &[usize], split: SplitTag) -> Result<MetricReport> {
    match (kind, labels) {
        (MetricName::Accuracy, Labels::Classes(y)) => accuracy(logits, y, mask, split),
        (MetricName::RocAuc, Labels::Classes(_)) => {
            roc_auc(&positive_scores(logits, labels, 1)?, &labels.binary_column(1), mask, split)
        }
        (MetricName::RocAuc, Labels::Multilabel(t)) => {
            let mut values = Vec::new();
            for col in 0..t.cols() {
                match roc_auc(&positive_scores(logits, labels, col)?, &labels.binary_column(col), mask, split) {
                    Ok(r) => values.push(r.value),
                    Err(Error::UndefinedMetric(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            if values.is_empty() {
                return Err(Error::UndefinedMetric("no label column has both classes".into()));
            }
            Ok(MetricReport {
                name: MetricName::RocAuc,
                value: values.iter().sum::<f64>() / values.len() as f64,
                split,
                n_evaluated: mask.len(),
            })
        }
        (kind, _) => Err(Error::Contract(format!("metric {} not defined for these labels", kind.as_str()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn all(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn accuracy_cases() {
        let logits = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let r = accuracy(&logits, &[0, 1, 0, 1], &all(4), SplitTag::Test).unwrap();
        assert_eq!(r.value, 0.75);
        assert_eq!(accuracy(&logits, &[0, 1, 0, 0], &all(4), SplitTag::Test).unwrap().value, 1.0);
        assert_eq!(accuracy(&logits, &[1, 0, 1, 1], &all(4), SplitTag::Test).unwrap().value, 0.0);
        assert!(matches!(accuracy(&logits, &[0; 4], &[], SplitTag::Test), Err(Error::Contract(_))));
    }

    #[test]
    fn auc_cases() {
        let r = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true], &all(4), SplitTag::Val).unwrap();
        assert_eq!(r.value, 1.0);
        let r = roc_auc(&[0.5; 4], &[false, true, false, true], &all(4), SplitTag::Val).unwrap();
        assert_eq!(r.value, 0.5);
        assert!(matches!(
            roc_auc(&[0.5; 2], &[true, true], &all(2), SplitTag::Val),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn des_cases() {
        let probs = [0.9, 0.8, 0.7, 0.6, 0.55, 0.51, 0.1];
        assert_eq!(des_score(&probs, &[0, 1], Some(&[0, 1]), DES_THRESHOLD).unwrap().value, 1.0);
        assert_eq!(des_score(&probs, &[0, 1], Some(&[4, 5]), DES_THRESHOLD).unwrap().value, 0.0);
        // Six predicted, four true; top-4 by probability are 0..4, of which
        // 0, 1, 3 are true.
        let r = des_score(&probs, &[0, 1, 3, 6], None, DES_THRESHOLD).unwrap();
        assert_eq!(r.value, 0.75);
        assert!(des_score(&probs, &[], None, DES_THRESHOLD).is_err());
    }

    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_matches_pairwise_on_twenty_points() {
        let mut rng = SeededRng::new(0);
        let scores: Vec<f64> = (0..20).map(|_| (rng.uniform() * 5.0).floor()).collect();
        let labels: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let r = roc_auc(&scores, &labels, &all(20), SplitTag::Test).unwrap();
        assert_eq!(r.value, pairwise_auc(&scores, &labels));
    }

    proptest! {
        #[test]
        fn des_is_a_fraction(seed in any::<u64>(), n in 2usize..50) {
            let mut rng = SeededRng::new(seed);
            let probs: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let truth: Vec<usize> = (0..n).filter(|_| rng.bernoulli(0.3)).collect();
            prop_assume!(!truth.is_empty());
            let r = des_score(&probs, &truth, None, DES_THRESHOLD).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.value));
        }
    }
}
