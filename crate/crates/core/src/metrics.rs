//! Evaluation metrics over a split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when the split has no pair of samples with distinct labels.
    pub pairwise_accuracy: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub n_samples: usize,
    pub config_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics {
    pub accuracy: f64,
    pub kendall_tau: f64,
    pub pairs: usize,
}

fn check(pred: &[f64], labels: &[f64]) -> Result<()> {
    if pred.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    Ok(())
}

pub fn mae(pred: &[f64], labels: &[f64]) -> Result<f64> {
    check(pred, labels)?;
    Ok(pred
        .iter()
        .zip(labels)
        .map(|(p, l)| (p - l).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn rmse(pred: &[f64], labels: &[f64]) -> Result<f64> {
    check(pred, labels)?;
    let mse = pred
        .iter()
        .zip(labels)
        .map(|(p, l)| (p - l).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Concordance over all pairs `i < j` whose labels differ. A pair is
/// concordant when the predictions order it the same way as the labels and
/// discordant when they order it the opposite way; tied predictions count as
/// neither. Accuracy is concordant/total and Kendall's tau-a is
/// (concordant − discordant)/total.
pub fn pair_metrics(pred: &[f64], labels: &[f64]) -> Result<Option<PairMetrics>> {
    check(pred, labels)?;
    let (mut conc, mut disc, mut total) = (0usize, 0usize, 0usize);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            let dl = labels[i] - labels[j];
            if dl == 0.0 {
                continue;
            }
            total += 1;
            let s = (pred[i] - pred[j]) * dl;
            if s > 0.0 {
                conc += 1;
            } else if s < 0.0 {
                disc += 1;
            }
        }
    }
    if total == 0 {
        return Ok(None);
    }
    let t = total as f64;
    Ok(Some(PairMetrics {
        accuracy: conc as f64 / t,
        kendall_tau: (conc as f64 - disc as f64) / t,
        pairs: total,
    }))
}

pub fn evaluate_predictions(
    pred: &[f64],
    labels: &[f64],
    config_digest: &str,
) -> Result<MetricsReport> {
    let pm = pair_metrics(pred, labels)?;
    Ok(MetricsReport {
        mae: mae(pred, labels)?,
        rmse: rmse(pred, labels)?,
        pairwise_accuracy: pm.map(|p| p.accuracy),
        kendall_tau: pm.map(|p| p.kendall_tau),
        n_samples: pred.len(),
        config_digest: config_digest.to_string(),
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}
