//! Classification metrics and training-history serialization.
//!
//! Binary metrics follow the usual confusion-matrix definitions:
//! accuracy = (TP+TN)/total, precision = TP/(TP+FP), recall = TP/(TP+FN),
//! F1 = 2PR/(P+R), with zero-denominator cases defined as 0. Weighted
//! variants average the per-class one-vs-rest values by class support.
//! ROC-AUC is computed exactly from rank statistics, counting ties as half.

use serde::Serialize;
use std::fmt::Write as _;
use thiserror::Error;

/// Outcome counts of a binary classifier against ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }
}

/// Count agreement between predictions and truth; both must hold 0/1 labels
/// of equal length.
pub fn confusion(preds: &[u8], truth: &[u8]) -> ConfusionMatrix {
    assert_eq!(preds.len(), truth.len(), "prediction/truth lengths disagree");
    let mut cm = ConfusionMatrix { true_pos: 0, true_neg: 0, false_pos: 0, false_neg: 0 };
    for (&p, &t) in preds.iter().zip(truth) {
        assert!(p <= 1 && t <= 1, "labels must be 0 or 1");
        match (p, t) {
            (1, 1) => cm.true_pos += 1,
            (0, 0) => cm.true_neg += 1,
            (1, 0) => cm.false_pos += 1,
            _ => cm.false_neg += 1,
        }
    }
    cm
}

/// Headline metrics plus support-weighted per-class averages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Derive all metrics from a non-empty confusion matrix. F1 uses the
/// equivalent single-division form 2TP/(2TP+FP+FN).
pub fn metrics(cm: &ConfusionMatrix) -> EvalReport {
    let total = cm.total();
    assert!(total > 0, "metrics require at least one evaluated example");
    let (tp, tn, fp, fne) = (cm.true_pos, cm.true_neg, cm.false_pos, cm.false_neg);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fne);
    let f1 = ratio(2 * tp, 2 * tp + fp + fne);
    // One-vs-rest view of the negative class.
    let precision0 = ratio(tn, tn + fne);
    let f1_0 = ratio(2 * tn, 2 * tn + fne + fp);
    let support1 = tp + fne;
    let support0 = tn + fp;
    let weighted_precision =
        (support1 as f64 * precision + support0 as f64 * precision0) / total as f64;
    // Support weights cancel the per-class recall denominators, so the
    // weighted recall reduces to (TP+TN)/total — the same division that
    // defines accuracy.
    let weighted_recall = ratio(tp + tn, total);
    let weighted_f1 = (support1 as f64 * f1 + support0 as f64 * f1_0) / total as f64;
    EvalReport {
        accuracy: ratio(tp + tn, total),
        precision,
        recall,
        f1,
        weighted_precision,
        weighted_recall,
        weighted_f1,
        auc: None,
    }
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("ROC-AUC is undefined when only one class is present in the truth labels")]
    SingleClass,
}

/// Exact ROC-AUC: P(score⁺ > score⁻) + ½·P(score⁺ = score⁻), computed from
/// average ranks so ties contribute half credit.
pub fn roc_auc(scores: &[f64], truth: &[u8]) -> Result<f64, MetricError> {
    assert_eq!(scores.len(), truth.len(), "score/truth lengths disagree");
    assert!(scores.iter().all(|s| s.is_finite()), "scores must be finite");
    let n = scores.len();
    let n_pos = truth.iter().filter(|&&t| t == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0_f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if truth[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Ok(auc)
}

/// Per-epoch training curve sample. Validation fields are absent when the
/// run had no validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_recall: Option<f64>,
    pub val_auc: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,val_recall,val_auc";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{:.6}", x)).unwrap_or_default()
}

/// Render history as CSV, floats at six decimals.
pub fn history_to_csv(history: &[EpochRecord]) -> String {
    assert!(!history.is_empty(), "history must contain at least one epoch");
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        writeln!(
            out,
            "{},{:.6},{:.6},{},{},{},{}",
            r.epoch,
            r.train_loss,
            r.train_acc,
            opt_cell(r.val_loss),
            opt_cell(r.val_acc),
            opt_cell(r.val_recall),
            opt_cell(r.val_auc),
        )
        .expect("string write");
    }
    out
}

/// Write the history CSV for curve plotting.
pub fn write_history(history: &[EpochRecord], path: &std::path::Path) -> std::io::Result<()> {
    std::fs::write(path, history_to_csv(history))
}

#[derive(Debug, Error)]
pub enum HistoryParseError {
    #[error("history header mismatch: expected {HISTORY_HEADER:?}")]
    BadHeader,
    #[error("history line {line}: {reason}")]
    BadRow { line: usize, reason: String },
}

/// Parse the `history_to_csv` format back.
pub fn parse_history(text: &str) -> Result<Vec<EpochRecord>, HistoryParseError> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(HistoryParseError::BadHeader);
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 7 {
            return Err(HistoryParseError::BadRow {
                line: i + 2,
                reason: format!("expected 7 cells, got {}", cells.len()),
            });
        }
        let num = |s: &str| -> Result<f64, HistoryParseError> {
            s.parse().map_err(|_| HistoryParseError::BadRow {
                line: i + 2,
                reason: format!("bad number {:?}", s),
            })
        };
        let opt = |s: &str| -> Result<Option<f64>, HistoryParseError> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        out.push(EpochRecord {
            epoch: cells[0].parse().map_err(|_| HistoryParseError::BadRow {
                line: i + 2,
                reason: format!("bad epoch {:?}", cells[0]),
            })?,
            train_loss: num(cells[1])?,
            train_acc: num(cells[2])?,
            val_loss: opt(cells[3])?,
            val_acc: opt(cells[4])?,
            val_recall: opt(cells[5])?,
            val_auc: opt(cells[6])?,
        });
    }
    Ok(out)
}

/// One row of the plain-text comparison table.
pub struct MetricRow {
    pub label: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalReport {
    pub fn binary_row(&self, label: impl Into<String>) -> MetricRow {
        MetricRow {
            label: label.into(),
            accuracy: self.accuracy,
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
        }
    }

    pub fn weighted_row(&self, label: impl Into<String>) -> MetricRow {
        MetricRow {
            label: label.into(),
            accuracy: self.accuracy,
            precision: self.weighted_precision,
            recall: self.weighted_recall,
            f1: self.weighted_f1,
        }
    }
}

/// Render an aligned table with Algorithm / Accuracy / Precision / Recall /
/// F1-Score columns, values as percentages.
pub fn format_metric_table(rows: &[MetricRow]) -> String {
    let headers = ["Algorithm", "Accuracy", "Precision", "Recall", "F1-Score"];
    let label_width =
        rows.iter().map(|r| r.label.len()).chain([headers[0].len()]).max().unwrap_or(9);
    let mut out = String::new();
    writeln!(
        out,
        "{:<label_width$}  {:>9}  {:>9}  {:>9}  {:>9}",
        headers[0], headers[1], headers[2], headers[3], headers[4]
    )
    .expect("string write");
    for r in rows {
        writeln!(
            out,
            "{:<label_width$}  {:>9.2}  {:>9.2}  {:>9.2}  {:>9.2}",
            r.label,
            r.accuracy * 100.0,
            r.precision * 100.0,
            r.recall * 100.0,
            r.f1 * 100.0
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn confusion_all_positive_agreement() {
        let cm = confusion(&[1; 5], &[1; 5]);
        assert_eq!(cm, ConfusionMatrix { true_pos: 5, true_neg: 0, false_pos: 0, false_neg: 0 });
    }

    #[test]
    fn confusion_total_disagreement() {
        let truth = [1, 0, 1, 0];
        let preds = [0, 1, 0, 1];
        let cm = confusion(&preds, &truth);
        assert_eq!(cm.true_pos, 0);
        assert_eq!(cm.true_neg, 0);
        assert_eq!(cm.false_pos, 2);
        assert_eq!(cm.false_neg, 2);
    }

    #[test]
    fn confusion_matches_counting_oracle() {
        let mut rng = Rng::new(60);
        let n = 1000;
        let preds: Vec<u8> = (0..n).map(|_| rng.index(2) as u8).collect();
        let truth: Vec<u8> = (0..n).map(|_| rng.index(2) as u8).collect();
        let cm = confusion(&preds, &truth);
        // Independent per-element loop.
        let (mut tp, mut tn, mut fp, mut fne) = (0, 0, 0, 0);
        for i in 0..n {
            if preds[i] == 1 && truth[i] == 1 {
                tp += 1;
            }
            if preds[i] == 0 && truth[i] == 0 {
                tn += 1;
            }
            if preds[i] == 1 && truth[i] == 0 {
                fp += 1;
            }
            if preds[i] == 0 && truth[i] == 1 {
                fne += 1;
            }
        }
        assert_eq!(
            cm,
            ConfusionMatrix { true_pos: tp, true_neg: tn, false_pos: fp, false_neg: fne }
        );
    }

    #[test]
    #[should_panic(expected = "lengths disagree")]
    fn confusion_rejects_length_mismatch() {
        confusion(&[1], &[1, 0]);
    }

    #[test]
    fn metrics_hand_example() {
        let cm = ConfusionMatrix { true_pos: 50, true_neg: 40, false_pos: 5, false_neg: 5 };
        let m = metrics(&cm);
        assert!((m.accuracy - 0.90).abs() < 1e-15);
        assert!((m.precision - 50.0 / 55.0).abs() < 1e-15);
        assert!((m.recall - 50.0 / 55.0).abs() < 1e-15);
        assert!((m.f1 - 50.0 / 55.0).abs() < 1e-15);
    }

    #[test]
    fn f1_equals_precision_when_precision_equals_recall() {
        // fp == fn forces precision == recall; F1 must then coincide bitwise.
        let mut rng = Rng::new(61);
        for _ in 0..200 {
            let cm = ConfusionMatrix {
                true_pos: rng.index(50),
                true_neg: rng.index(50),
                false_pos: 7,
                false_neg: 7,
            };
            if cm.total() == 0 {
                continue;
            }
            let m = metrics(&cm);
            assert_eq!(m.precision, m.recall);
            assert_eq!(m.f1, m.precision);
        }
    }

    #[test]
    fn metrics_degenerate_zero_conventions() {
        let cm = ConfusionMatrix { true_pos: 0, true_neg: 3, false_pos: 0, false_neg: 4 };
        let m = metrics(&cm);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn weighted_recall_is_accuracy() {
        let mut rng = Rng::new(62);
        for _ in 0..500 {
            let cm = ConfusionMatrix {
                true_pos: rng.index(100),
                true_neg: rng.index(100),
                false_pos: rng.index(100),
                false_neg: rng.index(100),
            };
            if cm.total() == 0 {
                continue;
            }
            let m = metrics(&cm);
            assert_eq!(m.weighted_recall.to_bits(), m.accuracy.to_bits());
        }
    }

    #[test]
    fn f1_between_min_and_max_of_p_and_r() {
        let mut rng = Rng::new(63);
        for _ in 0..500 {
            let cm = ConfusionMatrix {
                true_pos: 1 + rng.index(80),
                true_neg: rng.index(80),
                false_pos: rng.index(80),
                false_neg: rng.index(80),
            };
            let m = metrics(&cm);
            if m.precision > 0.0 && m.recall > 0.0 {
                let lo = m.precision.min(m.recall);
                let hi = m.precision.max(m.recall);
                assert!(m.f1 >= lo - 1e-12 && m.f1 <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn accuracy_times_total_recovers_correct_count() {
        let mut rng = Rng::new(64);
        for _ in 0..200 {
            let cm = ConfusionMatrix {
                true_pos: rng.index(40),
                true_neg: rng.index(40),
                false_pos: rng.index(40),
                false_neg: rng.index(40),
            };
            if cm.total() == 0 {
                continue;
            }
            let m = metrics(&cm);
            let recovered = m.accuracy * cm.total() as f64;
            assert_eq!(recovered.round() as usize, cm.true_pos + cm.true_neg);
            assert!((recovered - (cm.true_pos + cm.true_neg) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn auc_perfect_separation() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let truth = [1, 1, 0, 0];
        assert_eq!(roc_auc(&scores, &truth).unwrap(), 1.0);
    }

    #[test]
    fn auc_identical_scores_is_half() {
        let scores = [0.5; 6];
        let truth = [1, 0, 1, 0, 1, 0];
        assert_eq!(roc_auc(&scores, &truth).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_is_error() {
        assert!(roc_auc(&[0.1, 0.9], &[1, 1]).is_err());
    }

    /// O(N²) pairwise comparison, the definitional form.
    fn auc_pairwise(scores: &[f64], truth: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if truth[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if truth[j] != 0 {
                    continue;
                }
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = Rng::new(65);
        for _ in 0..100 {
            let n = 2 + rng.index(49);
            // Coarse grid of scores so ties actually occur.
            let scores: Vec<f64> = (0..n).map(|_| rng.index(8) as f64 / 8.0).collect();
            let mut truth: Vec<u8> = (0..n).map(|_| rng.index(2) as u8).collect();
            truth[0] = 1;
            truth[n - 1] = 0;
            let fast = roc_auc(&scores, &truth).unwrap();
            let slow = auc_pairwise(&scores, &truth);
            assert!((fast - slow).abs() < 1e-12, "{} vs {}", fast, slow);
        }
    }

    #[test]
    fn auc_complement_identity_without_ties() {
        let mut rng = Rng::new(66);
        // Distinct scores via shuffled grid.
        let mut scores: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        rng.shuffle(&mut scores);
        let truth: Vec<u8> = (0..20).map(|_| rng.index(2) as u8).collect();
        let truth = {
            let mut t = truth;
            t[0] = 1;
            t[1] = 0;
            t
        };
        let a = roc_auc(&scores, &truth).unwrap();
        let flipped: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        let b = roc_auc(&flipped, &truth).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    fn sample_history() -> Vec<EpochRecord> {
        vec![EpochRecord {
            epoch: 1,
            train_loss: 0.693147,
            train_acc: 0.5,
            val_loss: Some(0.7),
            val_acc: Some(0.45),
            val_recall: Some(0.4),
            val_auc: Some(0.55),
        }]
    }

    #[test]
    fn single_epoch_history_is_two_lines() {
        let csv = history_to_csv(&sample_history());
        assert_eq!(csv.trim_end().lines().count(), 2);
        assert!(csv.starts_with(HISTORY_HEADER));
    }

    #[test]
    fn history_round_trips_at_six_decimals() {
        let history = vec![
            EpochRecord {
                epoch: 1,
                train_loss: 0.123456789,
                train_acc: 0.5,
                val_loss: None,
                val_acc: None,
                val_recall: None,
                val_auc: None,
            },
            EpochRecord {
                epoch: 2,
                train_loss: 0.1,
                train_acc: 0.75,
                val_loss: Some(0.25),
                val_acc: Some(0.8),
                val_recall: Some(0.6),
                val_auc: Some(0.9),
            },
        ];
        let csv = history_to_csv(&history);
        let parsed = parse_history(&csv).unwrap();
        assert_eq!(history_to_csv(&parsed), csv);
        assert_eq!(parsed[0].val_loss, None);
        assert!((parsed[0].train_loss - 0.123457).abs() < 1e-9);
    }

    #[test]
    fn table_mirrors_comparison_columns() {
        let report = metrics(&ConfusionMatrix {
            true_pos: 50,
            true_neg: 40,
            false_pos: 5,
            false_neg: 5,
        });
        let table = format_metric_table(&[
            report.binary_row("demo (binary)"),
            report.weighted_row("demo (weighted)"),
        ]);
        assert!(table.contains("Algorithm"));
        assert!(table.contains("F1-Score"));
        assert!(table.contains("90.00"));
    }
}
