use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::bce_terms;

/// Area under the ROC curve by the rank-sum statistic; tied scores share
/// their average rank.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l > 0.5).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!("AUC needs both classes, got {pos} positives and {neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] > 0.5 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean clamped binary cross-entropy. Terms are summed in sorted order so the
/// value does not depend on sample order.
pub fn logloss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::shape("logloss", &[probs.len()], &[labels.len()]));
    }
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut terms: Vec<f64> = bce_terms(probs, labels).collect();
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>() / probs.len() as f64)
}

/// Relative AUC improvement over `auc_base` in percent.
pub fn relaimpr(auc_model: f64, auc_base: f64) -> Result<f64> {
    if auc_base == 0.5 {
        return Err(Error::Metric("RelaImpr is undefined for a baseline AUC of 0.5".into()));
    }
    Ok(((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub auc: f64,
    pub logloss: f64,
    pub samples: usize,
    pub positives: usize,
}

impl EvalMetrics {
    pub fn compute(probs: &[f64], labels: &[f64]) -> Result<Self> {
        Ok(Self {
            auc: auc(probs, labels)?,
            logloss: logloss(probs, labels)?,
            samples: labels.len(),
            positives: labels.iter().filter(|&&l| l > 0.5).count(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0., 0., 1., 1.]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[0., 1., 0., 1.]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0., 0., 1., 1.]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[1., 1.]), Err(Error::Metric(_))));
    }

    #[test]
    fn relaimpr_examples() {
        assert!((relaimpr(0.6098, 0.5992).unwrap() - 10.69).abs() < 0.01);
        assert_eq!(relaimpr(0.6, 0.6).unwrap(), 0.0);
        assert!(relaimpr(0.6, 0.5).is_err());
    }

    #[test]
    fn logloss_is_order_free() {
        let p = [0.9, 0.2, 0.7, 0.01, 0.5];
        let y = [1., 0., 0., 1., 1.];
        let a = logloss(&p, &y).unwrap();
        let b = logloss(&[0.5, 0.01, 0.7, 0.2, 0.9], &[1., 1., 0., 0., 1.]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(logloss(&[], &[]).is_err());
    }
}
