use serde::{Deserialize, Serialize};

use crate::error::{D2kError, Result};
use crate::numeric::bce_mean;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub auc: f64,
    pub logloss: f64,
}

impl MetricPair {
    pub fn compute(scores: &[f64], labels: &[f64]) -> Result<Self> {
        Ok(Self {
            auc: auc(scores, labels)?,
            logloss: logloss(scores, labels)?,
        })
    }
}

/// Area under the ROC curve via the Mann-Whitney rank statistic. Tied
/// scores receive their average rank, so a tied positive/negative pair
/// counts one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(D2kError::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(D2kError::Metric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(D2kError::Metric(format!("AUC needs both classes ({n_pos} positive, {n_neg} negative)")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based, tie-averaged) ranks of positives, doubled to stay integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_run = order[i..j].iter().filter(|&&k| labels[k] > 0.5).count() as u128;
        // average rank of run i..j is (i + 1 + j) / 2
        rank_sum2 += pos_in_run * (i as u128 + 1 + j as u128);
        i = j;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2.0 * p as f64 * n as f64))
}

/// Mean negative log-likelihood with probabilities clamped as in training.
pub fn logloss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(D2kError::Metric("logloss of an empty set".into()));
    }
    if scores.len() != labels.len() {
        return Err(D2kError::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    Ok(bce_mean(scores, labels))
}

/// O(n²) pairwise AUC, the reference definition.
pub fn auc_pairwise(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        if yi <= 0.5 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj > 0.5 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        return Err(D2kError::Metric("AUC needs both classes".into()));
    }
    Ok(wins / pairs)
}
