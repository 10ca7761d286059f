//! Confusion matrices and per-class metrics. Rows are true classes, columns
//! predicted classes, both in (Sell, Hold, Buy) order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeler::Label;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn add(&mut self, truth: Label, pred: Label) {
        self.counts[truth.class_index()][pred.class_index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    /// Number of samples whose true class is `i`.
    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// `trace / total`, or 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }

    pub fn recall(&self, i: usize) -> Option<f64> {
        match self.row_sum(i) {
            0 => None,
            r => Some(self.counts[i][i] as f64 / r as f64),
        }
    }

    pub fn precision(&self, j: usize) -> Option<f64> {
        match self.col_sum(j) {
            0 => None,
            c => Some(self.counts[j][j] as f64 / c as f64),
        }
    }
}

pub fn confusion(preds: &[Label], truths: &[Label]) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} true labels",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InsufficientData("no predictions to evaluate".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(truths) {
        cm.add(t, p);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub support: u64,
    /// Set when the precision denominator is zero (class never predicted);
    /// `precision` is then reported as 0.
    pub precision_undefined: bool,
    /// Set when the class never occurs; `recall` is then reported as 0.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub sell: ClassMetrics,
    pub hold: ClassMetrics,
    pub buy: ClassMetrics,
}

impl PerClass {
    pub fn get(&self, label: Label) -> &ClassMetrics {
        match label {
            Label::Sell => &self.sell,
            Label::Hold => &self.hold,
            Label::Buy => &self.buy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: [[u64; 3]; 3],
    pub total: u64,
    pub accuracy: f64,
    pub per_class: PerClass,
}

impl MetricsReport {
    pub fn confusion(&self) -> ConfusionMatrix {
        ConfusionMatrix { counts: self.counts }
    }
}

pub fn metrics_report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    if cm.total() == 0 {
        return Err(Error::InsufficientData("confusion matrix is empty".into()));
    }
    let class = |i: usize| {
        let (p, r) = (cm.precision(i), cm.recall(i));
        ClassMetrics {
            precision: p.unwrap_or(0.0),
            recall: r.unwrap_or(0.0),
            support: cm.row_sum(i),
            precision_undefined: p.is_none(),
            recall_undefined: r.is_none(),
        }
    };
    Ok(MetricsReport {
        counts: cm.counts,
        total: cm.total(),
        accuracy: cm.accuracy(),
        per_class: PerClass {
            sell: class(0),
            hold: class(1),
            buy: class(2),
        },
    })
}
