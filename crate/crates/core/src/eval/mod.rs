//! Ranking and loss metrics, the overfitting report and step timing.

mod bench;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Instance;
use crate::model::{cross_entropy, predict_batch, ModelError, ParamSet, Variant};

pub use bench::{bench, BenchReport, TimingStats};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("AUC is undefined: {0}")]
    Undefined(&'static str),
    #[error("scores and labels differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("relative improvement needs a base AUC above 0.5, got {0}")]
    BaseAtChance(f64),
}

/// Area under the ROC curve over the pooled set, by the rank-sum formula
/// with average ranks for tied scores.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::Undefined("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::Undefined("labels are all one class"));
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
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Relative AUC improvement over a base model, in percent, measured from
/// the 0.5 chance level.
pub fn impr(auc_model: f64, auc_base: f64) -> Result<f64, EvalError> {
    if !(auc_base > 0.5) {
        return Err(EvalError::BaseAtChance(auc_base));
    }
    Ok(((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    pub train_loss: f64,
    pub test_loss: f64,
    /// `test_loss - train_loss`
    pub gap: f64,
}

pub fn mean_cross_entropy(p: &[f64], instances: &[Instance]) -> f64 {
    p.iter().zip(instances).map(|(&p, i)| cross_entropy(f64::from(i.label), p)).sum::<f64>() / p.len() as f64
}

pub fn overfit_report(
    params: &ParamSet,
    variant: Variant,
    train: &[Instance],
    test: &[Instance],
) -> Result<OverfitReport, ModelError> {
    let train_loss = mean_cross_entropy(&predict_batch(params, train, variant, 512)?, train);
    let test_loss = mean_cross_entropy(&predict_batch(params, test, variant, 512)?, test);
    Ok(OverfitReport { train_loss, test_loss, gap: test_loss - train_loss })
}
