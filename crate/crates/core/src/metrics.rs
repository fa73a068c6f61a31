//! Confusion matrices, threshold metrics and ranked-list average precision.
//!
//! Confusion matrices are laid out with rows for the output (predicted) class
//! and columns for the target class, so in the binary case with the positive
//! class first the matrix reads `[[TP, FP], [FN, TN]]`.
//!
//! Ratios whose denominator is zero are reported as `None`, never as zero.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    /// Row-major `[output][target]`.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    /// From rows indexed `[output][target]`.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::EmptyMatrix);
        }
        Ok(Self {
            n_classes: n,
            counts: rows.concat(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, output: usize, target: usize) -> u64 {
        self.counts[output * self.n_classes + target]
    }

    pub fn add(&mut self, output: usize, target: usize) {
        self.counts[output * self.n_classes + target] += 1;
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n_classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, i)).sum()
    }

    /// Samples predicted as `class` (row sum).
    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.n_classes).map(|t| self.get(class, t)).sum()
    }

    /// Samples whose target is `class` (column sum).
    pub fn actual(&self, class: usize) -> u64 {
        (0..self.n_classes).map(|p| self.get(p, class)).sum()
    }
}

pub fn confusion_matrix(predicted: &[usize], truth: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(n_classes);
    for (&p, &t) in predicted.iter().zip(truth) {
        if let Some(label) = [p, t].into_iter().find(|&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange { label, n_classes });
        }
        cm.add(p, t);
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den != 0).then(|| num as f64 / den as f64)
}

/// Weighted harmonic mean of precision and recall; `beta = 1` gives F1.
pub fn f_beta(precision: Option<f64>, recall: Option<f64>, beta: f64) -> Option<f64> {
    let (p, r) = (precision?, recall?);
    let b2 = beta * beta;
    let den = b2 * p + r;
    (den > 0.0).then(|| (1.0 + b2) * p * r / den)
}

/// One-vs-rest precision, recall and F-scores of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub fbeta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    pub positive_class: usize,
    pub beta: f64,
    pub per_class: Vec<ClassStats>,
}

impl ThresholdMetrics {
    pub fn positive(&self) -> &ClassStats {
        &self.per_class[self.positive_class]
    }
}

pub fn class_stats(cm: &ConfusionMatrix, class: usize, beta: f64) -> ClassStats {
    let tp = cm.get(class, class);
    let precision = ratio(tp, cm.predicted(class));
    let recall = ratio(tp, cm.actual(class));
    ClassStats {
        precision,
        recall,
        f1: f_beta(precision, recall, 1.0),
        fbeta: f_beta(precision, recall, beta),
    }
}

pub fn classification_metrics(cm: &ConfusionMatrix, positive_class: usize, beta: f64) -> Result<ThresholdMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    if positive_class >= cm.n_classes() {
        return Err(Error::LabelOutOfRange {
            label: positive_class,
            n_classes: cm.n_classes(),
        });
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidWeights(format!("beta must be a positive real, got {beta}")));
    }
    Ok(ThresholdMetrics {
        accuracy: cm.trace() as f64 / total as f64,
        positive_class,
        beta,
        per_class: (0..cm.n_classes()).map(|c| class_stats(cm, c, beta)).collect(),
    })
}

/// Average precision of a ranked relevance list: the mean, over relevant
/// positions `t`, of the precision of the top-`t` prefix. `None` when nothing
/// is relevant.
pub fn ranked_average_precision(relevance: impl IntoIterator<Item = bool>) -> Option<f64> {
    let mut hits = 0u64;
    let mut sum = 0.0;
    for (rank, rel) in relevance.into_iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Ranks samples by descending score, ties by ascending sample id.
pub fn rank_order(scores: &[f64], sample_ids: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => sample_ids[a].cmp(&sample_ids[b]),
        o => o,
    });
    order
}

/// Average precision of class `class` when samples are ranked by `scores`.
pub fn average_precision(scores: &[f64], truth: &[usize], sample_ids: &[String], class: usize) -> Result<f64> {
    if scores.len() != truth.len() || sample_ids.len() != truth.len() {
        return Err(Error::LengthMismatch {
            predicted: scores.len(),
            truth: truth.len(),
        });
    }
    let order = rank_order(scores, sample_ids);
    ranked_average_precision(order.iter().map(|&i| truth[i] == class)).ok_or_else(|| Error::NoRelevant(class.to_string()))
}

/// Per-class AP and their unweighted mean. `scores[i]` is the score vector of
/// sample `i`.
pub fn mean_ap(scores: &[Vec<f64>], truth: &[usize], sample_ids: &[String], n_classes: usize) -> Result<(Vec<f64>, f64)> {
    if scores.len() != truth.len() {
        return Err(Error::LengthMismatch {
            predicted: scores.len(),
            truth: truth.len(),
        });
    }
    let mut aps = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let column: Vec<f64> = scores
            .iter()
            .map(|row| row.get(c).copied().ok_or(Error::LabelOutOfRange { label: c, n_classes: row.len() }))
            .collect::<Result<_>>()?;
        aps.push(average_precision(&column, truth, sample_ids, c)?);
    }
    let map = aps.iter().sum::<f64>() / n_classes as f64;
    Ok((aps, map))
}

/// Threshold and ranking metrics for one set of decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub n_samples: usize,
    /// Samples the combiner abstained on; they count as errors in `accuracy`.
    pub rejected: usize,
    pub accuracy: f64,
    pub positive_class: usize,
    pub beta: f64,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassStats>,
    pub ap: Vec<f64>,
    pub map: f64,
}

impl MetricsReport {
    pub fn positive(&self) -> &ClassStats {
        &self.per_class[self.positive_class]
    }
}

/// Builds a full report from per-sample decisions and ranking scores.
///
/// `decisions[i] == None` marks a rejected forecast: it is left out of the
/// confusion matrix and counted in `rejected`. `scores[i]` ranks sample `i`
/// for average precision.
pub fn evaluate(
    decisions: &[Option<usize>],
    scores: &[Vec<f64>],
    truth: &[usize],
    sample_ids: &[String],
    classes: &[String],
    positive_class: usize,
    beta: f64,
) -> Result<MetricsReport> {
    if decisions.len() != truth.len() {
        return Err(Error::LengthMismatch {
            predicted: decisions.len(),
            truth: truth.len(),
        });
    }
    if decisions.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let n = classes.len();
    if positive_class >= n {
        return Err(Error::LabelOutOfRange {
            label: positive_class,
            n_classes: n,
        });
    }
    let (kept_pred, kept_truth): (Vec<usize>, Vec<usize>) = decisions
        .iter()
        .zip(truth)
        .filter_map(|(d, &t)| d.map(|p| (p, t)))
        .unzip();
    let cm = confusion_matrix(&kept_pred, &kept_truth, n)?;
    let rejected = decisions.len() - kept_pred.len();
    let per_class = if cm.total() > 0 {
        classification_metrics(&cm, positive_class, beta)?.per_class
    } else {
        (0..n).map(|c| class_stats(&cm, c, beta)).collect()
    };
    let (ap, map) = mean_ap(scores, truth, sample_ids, n)?;
    Ok(MetricsReport {
        classes: classes.to_vec(),
        n_samples: decisions.len(),
        rejected,
        accuracy: cm.trace() as f64 / decisions.len() as f64,
        positive_class,
        beta,
        confusion: cm,
        per_class,
        ap,
        map,
    })
}
