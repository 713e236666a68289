//! Confusion-matrix based segmentation metrics: overall accuracy, per-class
//! and mean F1, and frequency-weighted IoU.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::kernels::IGNORE_LABEL;

/// `counts[i * n + j]` = pixels of true class `i` predicted as class `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        assert!(num_classes > 0, "confusion matrix needs at least one class");
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Build from row-major counts.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if num_classes == 0 || counts.len() != num_classes * num_classes {
            return Err(Error::shape(
                "confusion_matrix",
                "counts",
                num_classes * num_classes,
                counts.len(),
            ));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.num_classes..(i + 1) * self.num_classes].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, j)).sum()
    }

    /// Tally `N × H × W` label maps. Pixels whose truth is `ignore` are
    /// skipped; every other value must be a valid class.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8], dims: [usize; 3], ignore: u8) -> Result<()> {
        let [_, h, w] = dims;
        let expected: usize = dims.iter().product();
        if pred.len() != expected {
            return Err(Error::shape("accumulate_confusion", "prediction pixels", expected, pred.len()));
        }
        if truth.len() != expected {
            return Err(Error::shape("accumulate_confusion", "truth pixels", expected, truth.len()));
        }
        let n = self.num_classes;
        let out_of_range = |value: u8, i: usize| Error::LabelOutOfRange {
            value,
            num_classes: n,
            n: i / (h * w),
            y: (i / w) % h,
            x: i % w,
        };
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            if t == ignore {
                continue;
            }
            if t as usize >= n {
                return Err(out_of_range(t, i));
            }
            if p as usize >= n {
                return Err(out_of_range(p, i));
            }
            self.counts[t as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("merge", "num_classes", self.num_classes, other.num_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn require_scored(&self, op: &'static str) -> Result<u64> {
        match self.total() {
            0 => Err(Error::NoScoredPixels(op)),
            t => Ok(t),
        }
    }
}

/// Confusion matrix of a batch of label maps with the default ignore label.
pub fn accumulate_confusion(pred: &[u8], truth: &[u8], dims: [usize; 3], num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, truth, dims, IGNORE_LABEL)?;
    Ok(cm)
}

/// `trace / total`.
pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.require_scored("overall_accuracy")?;
    let correct: u64 = (0..cm.num_classes).map(|i| cm.get(i, i)).sum();
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScore {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    /// `None` when the class is absent from both truth and prediction.
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct F1Scores {
    pub per_class: Vec<ClassScore>,
    /// Mean over classes with a defined F1.
    pub mean: f64,
}

/// Per-class precision, recall and F1. A class that never occurs and is
/// never predicted is excluded from the mean; otherwise a zero denominator
/// gives 0.
pub fn f1_scores(cm: &ConfusionMatrix) -> Result<F1Scores> {
    cm.require_scored("f1_scores")?;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassScore> = (0..cm.num_classes)
        .map(|c| {
            let (tp, row, col) = (cm.get(c, c), cm.row_sum(c), cm.col_sum(c));
            let precision = ratio(tp, col);
            let recall = ratio(tp, row);
            let f1 = if row == 0 && col == 0 {
                None
            } else if precision + recall == 0.0 {
                Some(0.0)
            } else {
                Some(2.0 * precision * recall / (precision + recall))
            };
            ClassScore {
                class: c,
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().filter_map(|s| s.f1).collect();
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(F1Scores { per_class, mean })
}

/// Frequency-weighted IoU: `Σ_i row_i · IoU_i / total`, skipping classes
/// with an empty row.
pub fn fw_iou(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.require_scored("fw_iou")?;
    let mut acc = 0.0;
    for i in 0..cm.num_classes {
        let row = cm.row_sum(i);
        if row == 0 {
            continue;
        }
        let tp = cm.get(i, i);
        let union = row + cm.col_sum(i) - tp;
        acc += (row * tp) as f64 / union as f64;
    }
    Ok(acc / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricConventions {
    pub ignore_index: u8,
    pub absent_class_f1: &'static str,
    pub zero_precision_recall_f1: f64,
    pub fwiou_skips_empty_rows: bool,
}

impl Default for MetricConventions {
    fn default() -> Self {
        Self {
            ignore_index: IGNORE_LABEL,
            absent_class_f1: "excluded from mean_f1",
            zero_precision_recall_f1: 0.0,
            fwiou_skips_empty_rows: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub per_class: Vec<ClassScore>,
    pub per_class_f1: Vec<Option<f64>>,
    pub mean_f1: f64,
    pub fwiou: f64,
    pub num_classes: usize,
    /// Row-major counts, rows = truth.
    pub confusion: Vec<u64>,
    pub conventions: MetricConventions,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let f1 = f1_scores(cm)?;
        Ok(Self {
            oa: overall_accuracy(cm)?,
            per_class_f1: f1.per_class.iter().map(|s| s.f1).collect(),
            per_class: f1.per_class,
            mean_f1: f1.mean,
            fwiou: fw_iou(cm)?,
            num_classes: cm.num_classes,
            confusion: cm.counts.clone(),
            conventions: MetricConventions::default(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
