//! Classification metrics: accuracy, macro F1 / recall, macro one-vs-rest AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// `N × C` score rows (each summing to 1) with their true labels.
#[derive(Debug, Clone)]
pub struct EvalBatch {
    scores: Matrix,
    labels: Vec<usize>,
}

impl EvalBatch {
    pub fn new(scores: Matrix, labels: Vec<usize>) -> Result<Self> {
        if scores.rows() == 0 || scores.cols() == 0 {
            return Err(Error::domain("evaluation batch must have at least one row and class"));
        }
        if labels.len() != scores.rows() {
            return Err(Error::shape("EvalBatch labels", scores.rows(), labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= scores.cols()) {
            return Err(Error::domain(format!(
                "label {l} out of range for {} classes",
                scores.cols()
            )));
        }
        for i in 0..scores.rows() {
            let row = scores.row(i);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| !v.is_finite()) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::domain(format!("score row {i} does not sum to 1 (sum {sum})")));
            }
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.scores.cols()
    }

    /// Argmax per row, ties to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.scores.rows())
            .map(|i| {
                let row = self.scores.row(i);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

pub fn accuracy(b: &EvalBatch) -> f64 {
    let correct = b.predictions().iter().zip(b.labels()).filter(|(p, l)| p == l).count();
    correct as f64 / b.labels().len() as f64
}

/// `m[true][predicted]` counts.
pub fn confusion_matrix(b: &EvalBatch) -> Vec<Vec<usize>> {
    let c = b.num_classes();
    let mut m = vec![vec![0; c]; c];
    for (p, &l) in b.predictions().iter().zip(b.labels()) {
        m[l][*p] += 1;
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class scores; `None` for classes absent from both labels and
/// predictions.
pub fn per_class_scores(b: &EvalBatch) -> Vec<Option<ClassScores>> {
    let m = confusion_matrix(b);
    let c = m.len();
    (0..c)
        .map(|k| {
            let tp = m[k][k] as f64;
            let actual: usize = m[k].iter().sum();
            let predicted: usize = (0..c).map(|r| m[r][k]).sum();
            if actual == 0 && predicted == 0 {
                return None;
            }
            let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            Some(ClassScores { precision, recall, f1 })
        })
        .collect()
}

fn macro_mean(b: &EvalBatch, pick: impl Fn(&ClassScores) -> f64) -> f64 {
    let present: Vec<f64> = per_class_scores(b).iter().flatten().map(pick).collect();
    present.iter().sum::<f64>() / present.len() as f64
}

pub fn macro_f1(b: &EvalBatch) -> f64 {
    macro_mean(b, |s| s.f1)
}

pub fn macro_recall(b: &EvalBatch) -> f64 {
    macro_mean(b, |s| s.recall)
}

/// Mann–Whitney AUC of `scores` for the positives flagged in `positive`;
/// ties count one half. `None` if either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += midrank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub macro_auc: f64,
    /// `None` for classes that were excluded.
    pub per_class: Vec<Option<f64>>,
    /// Classes present in the labels but lacking positives or negatives.
    pub excluded: Vec<usize>,
}

pub fn auc_ovr_report(b: &EvalBatch) -> Result<AucReport> {
    let c = b.num_classes();
    let mut per_class = vec![None; c];
    let mut excluded = Vec::new();
    for (k, slot) in per_class.iter_mut().enumerate() {
        let positive: Vec<bool> = b.labels().iter().map(|&l| l == k).collect();
        if !positive.iter().any(|&p| p) {
            continue;
        }
        let col: Vec<f64> = (0..b.scores().rows()).map(|i| b.scores().get(i, k)).collect();
        match binary_auc(&col, &positive) {
            Some(a) => *slot = Some(a),
            None => excluded.push(k),
        }
    }
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "one-vs-rest AUC needs a class with both positives and negatives; excluded {excluded:?}"
        )));
    }
    Ok(AucReport {
        macro_auc: vals.iter().sum::<f64>() / vals.len() as f64,
        per_class,
        excluded,
    })
}

pub fn macro_auc_ovr(b: &EvalBatch) -> Result<f64> {
    auc_ovr_report(b).map(|r| r.macro_auc)
}

/// All four headline metrics; AUC is `None` when undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub recall_macro: f64,
    pub auc_macro: Option<f64>,
}

pub fn summarize(b: &EvalBatch) -> MetricSummary {
    MetricSummary {
        accuracy: accuracy(b),
        f1_macro: macro_f1(b),
        recall_macro: macro_recall(b),
        auc_macro: macro_auc_ovr(b).ok(),
    }
}
