//! Evaluation metrics: accuracy, per-class precision/recall/F1, macro-F1,
//! confusion matrices, and aggregation across runs.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// K×K integer counts; rows are gold classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn count(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold * self.k + pred]
    }

    pub fn add(&mut self, gold: usize, pred: usize) {
        self.counts[gold * self.k + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            eprintln!("warning: accuracy of an empty confusion matrix defined as 0");
            return 0.0;
        }
        let trace: u64 = (0..self.k).map(|i| self.count(i, i)).sum();
        trace as f64 / total as f64
    }

    /// (precision, recall, f1) per class, with the 0-when-undefined
    /// convention for empty denominators.
    pub fn per_class_prf(&self) -> Vec<(f64, f64, f64)> {
        (0..self.k)
            .map(|c| {
                let tp = self.count(c, c) as f64;
                let pred: u64 = (0..self.k).map(|g| self.count(g, c)).sum();
                let gold: u64 = (0..self.k).map(|p| self.count(c, p)).sum();
                let precision = if pred == 0 { 0.0 } else { tp / pred as f64 };
                let recall = if gold == 0 { 0.0 } else { tp / gold as f64 };
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                (precision, recall, f1)
            })
            .collect()
    }

    /// CSV with a header row of predicted classes and one row per gold class.
    pub fn to_csv(&self, labels: &[&str]) -> String {
        assert_eq!(labels.len(), self.k);
        let mut out = String::from("gold");
        for l in labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for g in 0..self.k {
            out.push_str(labels[g]);
            for p in 0..self.k {
                out.push_str(&format!(",{}", self.count(g, p)));
            }
            out.push('\n');
        }
        out
    }
}

/// Tally gold/predicted label sequences into a confusion matrix.
pub fn confusion(gold: &[Vec<usize>], pred: &[Vec<usize>], k: usize) -> Result<ConfusionMatrix> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} gold sequences vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (gs, ps) in gold.iter().zip(pred) {
        if gs.len() != ps.len() {
            return Err(Error::Contract(format!(
                "sequence length mismatch: {} gold vs {} predicted",
                gs.len(),
                ps.len()
            )));
        }
        for (&g, &p) in gs.iter().zip(ps) {
            cm.add(g, p);
        }
    }
    Ok(cm)
}

/// Unweighted mean of per-class F1. Classes absent from both gold and
/// predictions still count with F1 = 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    if cm.total() == 0 {
        eprintln!("warning: macro-F1 of an empty prediction set defined as 0");
        return 0.0;
    }
    let prf = cm.per_class_prf();
    prf.iter().map(|(_, _, f1)| f1).sum::<f64>() / cm.k as f64
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassScore {
    pub tag: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Headline metrics for one run, or the mean ± population std across runs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScore>,
    pub n_runs: usize,
    pub accuracy_std: f64,
    pub macro_f1_std: f64,
}

impl RunReport {
    pub fn from_confusion(cm: &ConfusionMatrix, labels: &[&str]) -> Self {
        let prf = cm.per_class_prf();
        RunReport {
            accuracy: cm.accuracy(),
            macro_f1: macro_f1(cm),
            per_class: labels
                .iter()
                .zip(prf)
                .map(|(tag, (precision, recall, f1))| ClassScore {
                    tag: (*tag).to_string(),
                    precision,
                    recall,
                    f1,
                })
                .collect(),
            n_runs: 1,
            accuracy_std: 0.0,
            macro_f1_std: 0.0,
        }
    }

    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "accuracy  {:<8.4}  macro-F1  {:<8.4}  (n_runs {})\n",
            self.accuracy, self.macro_f1, self.n_runs
        ));
        if self.n_runs > 1 {
            out.push_str(&format!(
                "   ±std   {:<8.4}            {:<8.4}\n",
                self.accuracy_std, self.macro_f1_std
            ));
        }
        out.push_str(&format!(
            "{:<6} {:>9} {:>9} {:>9}\n",
            "class", "precision", "recall", "f1"
        ));
        for c in &self.per_class {
            out.push_str(&format!(
                "{:<6} {:>9.4} {:>9.4} {:>9.4}\n",
                c.tag, c.precision, c.recall, c.f1
            ));
        }
        out
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-metric mean and population standard deviation across runs.
pub fn aggregate(reports: &[RunReport]) -> Result<RunReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Contract("aggregate: no reports".into()))?;
    let (acc_mean, acc_std) = mean_std(&reports.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    let (f1_mean, f1_std) = mean_std(&reports.iter().map(|r| r.macro_f1).collect::<Vec<_>>());
    let per_class = (0..first.per_class.len())
        .map(|c| {
            let p = reports.iter().map(|r| r.per_class[c].precision).sum::<f64>();
            let r_ = reports.iter().map(|r| r.per_class[c].recall).sum::<f64>();
            let f = reports.iter().map(|r| r.per_class[c].f1).sum::<f64>();
            let n = reports.len() as f64;
            ClassScore {
                tag: first.per_class[c].tag.clone(),
                precision: p / n,
                recall: r_ / n,
                f1: f / n,
            }
        })
        .collect();
    Ok(RunReport {
        accuracy: acc_mean,
        macro_f1: f1_mean,
        per_class,
        n_runs: reports.iter().map(|r| r.n_runs).sum(),
        accuracy_std: acc_std,
        macro_f1_std: f1_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_are_diagonal_with_unit_metrics() {
        let gold = vec![vec![0, 1, 2, 3, 4], vec![4, 3, 2, 1, 0]];
        let cm = confusion(&gold, &gold, 5).unwrap();
        for g in 0..5 {
            for p in 0..5 {
                assert_eq!(cm.count(g, p), u64::from(g == p) * 2);
            }
        }
        assert_eq!(cm.accuracy(), 1.0);
        assert_eq!(macro_f1(&cm), 1.0);
    }

    #[test]
    fn accuracy_is_trace_over_total() {
        let gold = vec![vec![0, 0, 1, 1]];
        let pred = vec![vec![0, 1, 1, 1]];
        let cm = confusion(&gold, &pred, 2).unwrap();
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.accuracy(), 3.0 / 4.0);
    }

    #[test]
    fn swapping_prediction_labels_permutes_columns() {
        let gold = vec![vec![0, 0, 1, 1, 2]];
        let pred = vec![vec![0, 1, 1, 2, 2]];
        let swapped: Vec<Vec<usize>> = pred
            .iter()
            .map(|s| s.iter().map(|&p| match p {
                1 => 2,
                2 => 1,
                x => x,
            }).collect())
            .collect();
        let a = confusion(&gold, &pred, 3).unwrap();
        let b = confusion(&gold, &swapped, 3).unwrap();
        for g in 0..3 {
            assert_eq!(a.count(g, 1), b.count(g, 2));
            assert_eq!(a.count(g, 2), b.count(g, 1));
            assert_eq!(a.count(g, 0), b.count(g, 0));
        }
    }

    #[test]
    fn hand_computed_macro_f1_case() {
        // gold [A,A,B,B], pred [A,A,A,A]: F1_A = 2/3, F1_B = 0, macro = 1/3
        let gold = vec![vec![0, 0, 1, 1]];
        let pred = vec![vec![0, 0, 0, 0]];
        let cm = confusion(&gold, &pred, 2).unwrap();
        let prf = cm.per_class_prf();
        assert_eq!(prf[0].2, 2.0 / 3.0);
        assert_eq!(prf[1].2, 0.0);
        assert_eq!(macro_f1(&cm), 1.0 / 3.0);
    }

    #[test]
    fn empty_predictions_give_zero_with_warning() {
        let cm = ConfusionMatrix::new(5);
        assert_eq!(macro_f1(&cm), 0.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        let gold = vec![vec![0, 1]];
        let pred = vec![vec![0]];
        assert!(confusion(&gold, &pred, 2).is_err());
    }

    fn report_with(acc: f64, f1: f64) -> RunReport {
        RunReport {
            accuracy: acc,
            macro_f1: f1,
            per_class: vec![],
            n_runs: 1,
            accuracy_std: 0.0,
            macro_f1_std: 0.0,
        }
    }

    #[test]
    fn aggregate_single_report_has_zero_std() {
        let agg = aggregate(&[report_with(0.5, 0.4)]).unwrap();
        assert_eq!(agg.macro_f1, 0.4);
        assert_eq!(agg.macro_f1_std, 0.0);
        assert_eq!(agg.n_runs, 1);
    }

    #[test]
    fn aggregate_hand_case_and_order_invariance() {
        let a = aggregate(&[report_with(0.6, 0.6), report_with(0.8, 0.8)]).unwrap();
        assert!((a.macro_f1 - 0.7).abs() < 1e-15);
        assert!((a.macro_f1_std - 0.1).abs() < 1e-15);
        let b = aggregate(&[report_with(0.8, 0.8), report_with(0.6, 0.6)]).unwrap();
        assert!((a.macro_f1 - b.macro_f1).abs() < 1e-15);
        assert!((a.macro_f1_std - b.macro_f1_std).abs() < 1e-15);
    }

    #[test]
    fn csv_rows_sum_to_gold_counts() {
        let gold = vec![vec![0, 0, 1, 2, 2, 2]];
        let pred = vec![vec![0, 1, 1, 0, 2, 2]];
        let cm = confusion(&gold, &pred, 3).unwrap();
        let csv = cm.to_csv(&["a", "b", "c"]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "gold,a,b,c");
        let row_sum = |line: &str| -> u64 {
            line.split(',').skip(1).map(|f| f.parse::<u64>().unwrap()).sum()
        };
        assert_eq!(row_sum(lines[1]), 2);
        assert_eq!(row_sum(lines[2]), 1);
        assert_eq!(row_sum(lines[3]), 3);
    }
}
