//! Confusion matrix and derived metrics.
//!
//! Per-class accuracy defaults to recall, under which the weighted average
//! (WA) reduces to overall accuracy; a flag switches to the precision-based
//! variant for comparison. Zero denominators yield 0 with a flag rather
//! than NaN.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// True when any denominator for this class was zero.
    pub zero_division: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    /// Rows = true class, columns = predicted class.
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetrics>,
    pub wa: f64,
    pub ua: f64,
    /// Which per-class accuracy fed WA/UA.
    pub acc_as_precision: bool,
}

/// Derive the metric suite from a square confusion matrix.
pub fn compute_metrics(confusion: &[Vec<u64>], acc_as_precision: bool) -> Result<MetricsReport> {
    let k = confusion.len();
    if k == 0 || confusion.iter().any(|row| row.len() != k) {
        return Err(SerError::Data(format!(
            "confusion matrix must be square and non-empty, got {} rows: {:?}",
            k,
            confusion.iter().map(|r| r.len()).collect::<Vec<_>>()
        )));
    }

    let mut per_class = Vec::with_capacity(k);
    let mut acc = vec![0.0f64; k];
    for i in 0..k {
        let tp = confusion[i][i];
        let row: u64 = confusion[i].iter().sum();
        let col: u64 = confusion.iter().map(|r| r[i]).sum();
        let fn_ = row - tp;
        let fp = col - tp;

        let mut zero_division = false;
        let precision = if tp + fp == 0 {
            zero_division = true;
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            zero_division = true;
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall == 0.0 {
            zero_division = true;
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        acc[i] = if acc_as_precision { precision } else { recall };
        per_class.push(ClassMetrics {
            class: i,
            precision,
            recall,
            f1,
            support: row,
            zero_division,
        });
    }

    let total: u64 = per_class.iter().map(|c| c.support).sum();
    let wa = if total == 0 {
        0.0
    } else {
        per_class
            .iter()
            .zip(&acc)
            .map(|(c, a)| c.support as f64 * a)
            .sum::<f64>()
            / total as f64
    };
    let ua = acc.iter().sum::<f64>() / k as f64;

    Ok(MetricsReport {
        confusion: confusion.to_vec(),
        per_class,
        wa,
        ua,
        acc_as_precision,
    })
}

impl MetricsReport {
    /// One row per class plus an aggregate row.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.class, c.precision, c.recall, c.f1, c.support
            ));
        }
        let total: u64 = self.per_class.iter().map(|c| c.support).sum();
        out.push_str(&format!("aggregate,{},{},,{}\n", self.wa, self.ua, total));
        out
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}
