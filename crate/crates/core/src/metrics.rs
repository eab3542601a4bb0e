//! Evaluation metrics.
//!
//! Accuracies are percentages in [0, 100]. Ranking ties are broken toward
//! the lower class index everywhere, so results never depend on iteration
//! order. "Micro" accuracy counts samples; "macro" averages the per-class
//! accuracies, which is the fair summary on imbalanced test sets.

use crate::numerics::LogitMatrix;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// The predicted class of one logit row: argmax, lower index on ties.
pub fn predict(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction (as a percentage) of samples whose true class ranks in the top
/// k logits. A class outranks another when its logit is greater, or equal
/// with a lower index.
pub fn topk_accuracy(logits: &LogitMatrix, labels: &[usize], k: usize) -> Result<f64> {
    let classes = logits.class_count();
    if labels.len() != logits.sample_count() {
        return Err(Error::LengthMismatch {
            context: "topk_accuracy labels",
            expected: logits.sample_count(),
            got: labels.len(),
        });
    }
    if k == 0 || k > classes {
        return Err(Error::Config(format!(
            "top-k rank {k} outside 1..={classes}"
        )));
    }
    let mut hits = 0usize;
    for (row, &label) in logits.rows().zip(labels) {
        if label >= classes {
            return Err(Error::IndexOutOfRange {
                context: "topk_accuracy label",
                index: label,
                len: classes,
            });
        }
        let target = row[label];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(i, &v)| v > target || (v == target && i < label))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Square count matrix: rows are true classes, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    class_count: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        class_count: usize,
    ) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::LengthMismatch {
                context: "confusion matrix",
                expected: labels.len(),
                got: predictions.len(),
            });
        }
        let mut counts = vec![0u64; class_count * class_count];
        for (&p, &t) in predictions.iter().zip(labels) {
            if p >= class_count || t >= class_count {
                return Err(Error::IndexOutOfRange {
                    context: "confusion matrix class",
                    index: p.max(t),
                    len: class_count,
                });
            }
            counts[t * class_count + p] += 1;
        }
        Ok(Self {
            class_count,
            counts,
        })
    }

    pub fn from_logits(logits: &LogitMatrix, labels: &[usize]) -> Result<Self> {
        let predictions: Vec<usize> = logits.rows().map(predict).collect();
        Self::from_predictions(&predictions, labels, logits.class_count())
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.class_count + predicted]
    }

    pub fn row(&self, true_class: usize) -> &[u64] {
        &self.counts[true_class * self.class_count..(true_class + 1) * self.class_count]
    }

    pub fn row_sum(&self, true_class: usize) -> u64 {
        self.row(true_class).iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Micro top-1 accuracy implied by the matrix: diagonal mass over total.
    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.class_count).map(|c| self.count(c, c)).sum();
        100.0 * diag as f64 / self.total() as f64
    }

    /// Per-class accuracy; `None` for classes with no test samples.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.class_count)
            .map(|c| {
                let n = self.row_sum(c);
                (n > 0).then(|| 100.0 * self.count(c, c) as f64 / n as f64)
            })
            .collect()
    }

    /// ln(1 + count) per cell, the usual compression for heat-map export.
    pub fn log1p_view(&self) -> Vec<Vec<f64>> {
        (0..self.class_count)
            .map(|t| self.row(t).iter().map(|&c| (c as f64).ln_1p()).collect())
            .collect()
    }

    /// Writes raw counts as CSV with a `true\predicted` header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["true".to_string()];
        header.extend((0..self.class_count).map(|c| format!("pred_{c}")));
        w.write_record(&header).map_err(csv_err)?;
        for t in 0..self.class_count {
            let mut record = vec![t.to_string()];
            record.extend(self.row(t).iter().map(|c| c.to_string()));
            w.write_record(&record).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Mean of the present per-class accuracies.
pub fn macro_accuracy(per_class: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = per_class.iter().flatten().cloned().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Boundaries of the frequency buckets, in training samples per class:
/// many-shot strictly above `many_gt`, few-shot strictly below `few_lt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitThresholds {
    pub many_gt: usize,
    pub few_lt: usize,
}

impl Default for SplitThresholds {
    fn default() -> Self {
        Self {
            many_gt: 100,
            few_lt: 20,
        }
    }
}

/// Mean per-class accuracy inside each frequency bucket. A bucket with no
/// classes (or none with test samples) is absent rather than zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracies {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub many: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub medium: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub few: Option<f64>,
}

pub fn split_accuracies(
    per_class: &[Option<f64>],
    train_counts: &[usize],
    thresholds: SplitThresholds,
) -> Result<SplitAccuracies> {
    if per_class.len() != train_counts.len() {
        return Err(Error::LengthMismatch {
            context: "split_accuracies",
            expected: train_counts.len(),
            got: per_class.len(),
        });
    }
    if thresholds.few_lt > thresholds.many_gt {
        return Err(Error::Config(format!(
            "few-shot boundary {} above many-shot boundary {}",
            thresholds.few_lt, thresholds.many_gt
        )));
    }
    let bucket_mean = |keep: &dyn Fn(usize) -> bool| -> Option<f64> {
        let accs: Vec<f64> = per_class
            .iter()
            .zip(train_counts)
            .filter(|(_, &n)| keep(n))
            .filter_map(|(a, _)| *a)
            .collect();
        if accs.is_empty() {
            None
        } else {
            Some(accs.iter().sum::<f64>() / accs.len() as f64)
        }
    };
    Ok(SplitAccuracies {
        many: bucket_mean(&|n| n > thresholds.many_gt),
        medium: bucket_mean(&|n| n >= thresholds.few_lt && n <= thresholds.many_gt),
        few: bucket_mean(&|n| n < thresholds.few_lt),
    })
}

/// Mean accuracy over incremental steps, excluding the first (plain
/// supervised) step. `None` when there is nothing after the first step.
pub fn avg_incremental(step_accuracies: &[f64]) -> Option<f64> {
    if step_accuracies.len() < 2 {
        return None;
    }
    let rest = &step_accuracies[1..];
    Some(rest.iter().sum::<f64>() / rest.len() as f64)
}

/// Spearman rank correlation with average ranks on ties. `None` when either
/// side has no rank variance (for example, all-equal counts).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            context: "spearman",
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::Config("spearman needs at least two points".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman"));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (vx * vy).sqrt()))
}

/// Monotone rank-bias diagnostic: Spearman correlation between training
/// counts and per-class negative free energies.
pub fn energy_bias_diagnostic(counts: &[usize], energies: &[f64]) -> Result<Option<f64>> {
    let xs: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    spearman(&xs, energies)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // 1-based ranks, tied entries share the average rank of their run
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: &[Vec<f64>]) -> LogitMatrix {
        LogitMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn top1_on_clear_winner() {
        let m = matrix(&[vec![3.0, 2.0, 1.0]]);
        assert_eq!(topk_accuracy(&m, &[0], 1).unwrap(), 100.0);
        assert_eq!(topk_accuracy(&m, &[2], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&m, &[2], 3).unwrap(), 100.0);
    }

    #[test]
    fn ties_go_to_the_lower_class_index() {
        let m = matrix(&[vec![1.0, 1.0]]);
        assert_eq!(topk_accuracy(&m, &[0], 1).unwrap(), 100.0);
        assert_eq!(topk_accuracy(&m, &[1], 1).unwrap(), 0.0);
        assert_eq!(predict(&[1.0, 1.0]), 0);
    }

    #[test]
    fn topk_validates_inputs() {
        let m = matrix(&[vec![1.0, 2.0]]);
        assert!(topk_accuracy(&m, &[0, 1], 1).is_err());
        assert!(topk_accuracy(&m, &[5], 1).is_err());
        assert!(topk_accuracy(&m, &[0], 0).is_err());
        assert!(topk_accuracy(&m, &[0], 3).is_err());
    }

    #[test]
    fn confusion_counts_and_accuracy_agree() {
        let preds = [0, 1, 1, 2];
        let labels = [0, 1, 2, 2];
        let cm = ConfusionMatrix::from_predictions(&preds, &labels, 3).unwrap();
        assert_eq!(cm.count(2, 1), 1);
        assert_eq!(cm.count(2, 2), 1);
        assert_eq!(cm.row_sum(2), 2);
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.accuracy(), 75.0);
        let per_class = cm.per_class_accuracy();
        assert_eq!(per_class, vec![Some(100.0), Some(100.0), Some(50.0)]);
    }

    #[test]
    fn absent_test_class_has_no_accuracy() {
        let cm = ConfusionMatrix::from_predictions(&[0], &[0], 2).unwrap();
        assert_eq!(cm.per_class_accuracy(), vec![Some(100.0), None]);
        assert_eq!(macro_accuracy(&cm.per_class_accuracy()), Some(100.0));
    }

    #[test]
    fn log1p_view_compresses_counts() {
        let cm = ConfusionMatrix::from_predictions(&[0, 0, 0], &[0, 0, 1], 2).unwrap();
        let v = cm.log1p_view();
        assert!((v[0][0] - (2.0f64).ln_1p()).abs() < 1e-15);
        assert!((v[1][0] - (1.0f64).ln_1p()).abs() < 1e-15);
        assert_eq!(v[0][1], 0.0);
        assert_eq!(v[1][1], 0.0);
    }

    #[test]
    fn split_accuracies_follow_the_bucket_rules() {
        let per_class = [Some(90.0), Some(60.0), Some(30.0)];
        let counts = [200, 50, 5];
        let s = split_accuracies(&per_class, &counts, SplitThresholds::default()).unwrap();
        assert_eq!(s.many, Some(90.0));
        assert_eq!(s.medium, Some(60.0));
        assert_eq!(s.few, Some(30.0));
    }

    #[test]
    fn empty_bucket_is_absent() {
        let per_class = [Some(90.0), Some(80.0)];
        let counts = [200, 150];
        let s = split_accuracies(&per_class, &counts, SplitThresholds::default()).unwrap();
        assert_eq!(s.many, Some(85.0));
        assert_eq!(s.medium, None);
        assert_eq!(s.few, None);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, "{\"many\":85.0}");
    }

    #[test]
    fn boundary_counts_are_medium() {
        let per_class = [Some(10.0), Some(20.0)];
        let counts = [100, 20];
        let s = split_accuracies(&per_class, &counts, SplitThresholds::default()).unwrap();
        assert_eq!(s.medium, Some(15.0));
        assert_eq!(s.many, None);
        assert_eq!(s.few, None);
    }

    #[test]
    fn avg_incremental_drops_the_first_step() {
        assert_eq!(avg_incremental(&[90.0, 80.0, 70.0]), Some(75.0));
        assert_eq!(avg_incremental(&[90.0]), None);
        assert_eq!(avg_incremental(&[]), None);
    }

    #[test]
    fn spearman_on_monotone_and_reversed_data() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&xs, &[10.0, 20.0, 30.0, 40.0]).unwrap(), Some(1.0));
        assert_eq!(
            spearman(&xs, &[40.0, 30.0, 20.0, 10.0]).unwrap(),
            Some(-1.0)
        );
    }

    #[test]
    fn spearman_averages_tied_ranks() {
        let got = spearman(&[1.0, 2.0, 2.0, 3.0], &[10.0, 20.0, 25.0, 30.0])
            .unwrap()
            .unwrap();
        assert!((got - 0.9f64.sqrt()).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn spearman_degenerate_inputs() {
        assert_eq!(spearman(&[5.0, 5.0], &[1.0, 2.0]).unwrap(), None);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn topk_is_monotone_in_k(
            rows in proptest::collection::vec(proptest::collection::vec(-9.0f64..9.0, 5), 1..12),
            labels in proptest::collection::vec(0usize..5, 12),
        ) {
            let m = matrix(&rows);
            let labels = &labels[..rows.len()];
            let mut last = 0.0;
            for k in 1..=5 {
                let acc = topk_accuracy(&m, labels, k).unwrap();
                prop_assert!(acc + 1e-12 >= last);
                last = acc;
            }
            prop_assert_eq!(topk_accuracy(&m, labels, 5).unwrap(), 100.0);
        }

        #[test]
        fn confusion_row_sums_match_label_counts(
            labels in proptest::collection::vec(0usize..4, 1..30),
            preds in proptest::collection::vec(0usize..4, 30),
        ) {
            let preds = &preds[..labels.len()];
            let cm = ConfusionMatrix::from_predictions(preds, &labels, 4).unwrap();
            for c in 0..4 {
                let want = labels.iter().filter(|&&l| l == c).count() as u64;
                prop_assert_eq!(cm.row_sum(c), want);
            }
            prop_assert_eq!(cm.total(), labels.len() as u64);
        }

        #[test]
        fn diagonal_mass_equals_top1(
            rows in proptest::collection::vec(proptest::collection::vec(-9.0f64..9.0, 4), 1..20),
            labels in proptest::collection::vec(0usize..4, 20),
        ) {
            let m = matrix(&rows);
            let labels = &labels[..rows.len()];
            let cm = ConfusionMatrix::from_logits(&m, labels).unwrap();
            let top1 = topk_accuracy(&m, labels, 1).unwrap();
            prop_assert!((cm.accuracy() - top1).abs() < 1e-12);
        }
    }
}
