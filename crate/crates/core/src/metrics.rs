//! Evaluation measures: fidelity to the black box, ROC AUC per concept,
//! recall at a fixed false-positive rate, and the Pareto frontier over
//! (fidelity, mean AUC) outcomes.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::Matrix;

/// `1 - mean(|pred - truth|)`.
pub fn fidelity(pred: &[f64], truth: &[f64]) -> Result<f64> {
    ensure!(!pred.is_empty(), Data, "fidelity of an empty set");
    ensure!(
        pred.len() == truth.len(),
        Shape,
        "fidelity: {} predictions for {} targets",
        pred.len(),
        truth.len()
    );
    let mae = pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64;
    Ok(1.0 - mae)
}

fn class_counts(labels: &[f64]) -> Result<(usize, usize)> {
    let mut pos = 0;
    for &y in labels {
        ensure!(y == 0.0 || y == 1.0, Data, "labels must be 0 or 1, got {y}");
        if y == 1.0 {
            pos += 1;
        }
    }
    Ok((pos, labels.len() - pos))
}

/// Rank-statistic ROC AUC with midranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    ensure!(
        scores.len() == labels.len(),
        Shape,
        "roc_auc: {} scores for {} labels",
        scores.len(),
        labels.len()
    );
    let (n_pos, n_neg) = class_counts(labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC undefined: labels contain a single class".into()));
    }
    ensure!(scores.iter().all(|s| s.is_finite()), NonFinite, "roc_auc scores");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based) midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count();
        rank_sum += midrank * positives as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Per-concept AUC of `pred` columns against binary `golden` columns, plus
/// the unweighted mean.
pub fn mean_concept_auc(pred: &Matrix, golden: &Matrix, names: &[String]) -> Result<(Vec<f64>, f64)> {
    ensure!(
        pred.shape() == golden.shape(),
        Shape,
        "predictions {:?} vs golden {:?}",
        pred.shape(),
        golden.shape()
    );
    ensure!(pred.cols() > 0, Shape, "no concept columns");
    let per = (0..pred.cols())
        .map(|c| {
            roc_auc(&pred.column(c), &golden.column(c)).map_err(|e| {
                let name = names.get(c).cloned().unwrap_or_else(|| format!("#{c}"));
                Error::Data(format!("concept {name}: {e}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((per, mean))
}

/// True-positive rate at the lowest threshold whose false-positive rate does
/// not exceed `fpr_level`. Instances are predicted positive when
/// `score >= threshold`; instances sharing a score cross the threshold
/// together.
pub fn recall_at_fpr(scores: &[f64], labels: &[f64], fpr_level: f64) -> Result<f64> {
    ensure!(
        fpr_level > 0.0 && fpr_level < 1.0,
        Config,
        "fpr level {fpr_level} must lie in (0, 1)"
    );
    ensure!(scores.len() == labels.len(), Shape, "recall_at_fpr: length mismatch");
    let (n_pos, n_neg) = class_counts(labels)?;
    ensure!(n_pos > 0 && n_neg > 0, Data, "recall at FPR needs both classes");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if fp as f64 / n_neg as f64 <= fpr_level {
            best = tp as f64 / n_pos as f64;
        } else {
            break;
        }
    }
    Ok(best)
}

/// `flags[i]` is true iff no other point is at least as good on both axes
/// and strictly better on one. Exact duplicates do not dominate each other.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<bool> {
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    // descending fidelity, then descending auc
    order.sort_by(|&a, &b| {
        points[b]
            .0
            .total_cmp(&points[a].0)
            .then(points[b].1.total_cmp(&points[a].1))
    });
    let mut flags = vec![false; n];
    let mut best_auc = f64::NEG_INFINITY;
    let mut i = 0;
    while i < n {
        // group equal fidelity
        let mut j = i;
        while j + 1 < n && points[order[j + 1]].0 == points[order[i]].0 {
            j += 1;
        }
        let group_max = points[order[i]].1;
        for &k in &order[i..=j] {
            let auc = points[k].1;
            // dominated by a higher-fidelity point with auc >= this one, or
            // by an equal-fidelity point with strictly higher auc
            flags[k] = !(best_auc >= auc || group_max > auc);
        }
        best_auc = best_auc.max(group_max);
        i = j + 1;
    }
    flags
}

/// Summary of one surrogate on held-out data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Absent for models without a distillation output.
    pub fidelity: Option<f64>,
    pub concept_names: Vec<String>,
    /// Empty for models without a concept output.
    pub per_concept_auc: Vec<f64>,
    pub mean_auc: Option<f64>,
    pub n_eval: usize,
    pub n_golden: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_at_fpr: Option<RecallAtFpr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAtFpr {
    pub fpr_level: f64,
    pub recall: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
