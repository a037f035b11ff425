//! Regression metrics, outlier detection scores and the signed-rank test.

mod wilcoxon;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use wilcoxon::{exact_p_value, normal_p_value, signed_ranks, stars, wilcoxon_signed_rank, PValueMethod, WilcoxonResult};

/// Landmark error, relative to the per-sample scale, above which a
/// prediction counts as a failure.
pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub failure_rate: f64,
    /// Mean absolute coordinate error per landmark group.
    pub per_landmark_mae: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
}

impl MetricReport {
    pub fn with_detection(mut self, precision: f64, recall: f64) -> Self {
        self.precision = Some(precision);
        self.recall = Some(recall);
        self
    }
}

fn check_pair(pred: &Matrix<f64>, truth: &Matrix<f64>) -> Result<()> {
    if pred.rows() != truth.rows() || pred.cols() != truth.cols() {
        return Err(Error::Shape(format!(
            "predictions are {}x{}, targets {}x{}",
            pred.rows(),
            pred.cols(),
            truth.rows(),
            truth.cols()
        )));
    }
    if pred.rows() == 0 {
        return Err(Error::Shape("no samples to evaluate".into()));
    }
    Ok(())
}

/// MAE and RMSE over every coordinate, failure rate over landmark groups.
///
/// A group fails when its Euclidean error divided by the sample's `scale`
/// exceeds `failure_threshold`.
pub fn metrics(
    pred: &Matrix<f64>,
    truth: &Matrix<f64>,
    groups: &[Range<usize>],
    failure_threshold: f64,
    scale: &[f64],
) -> Result<MetricReport> {
    check_pair(pred, truth)?;
    let n = pred.rows();
    if scale.len() != n {
        return Err(Error::Shape(format!("{} scales for {n} samples", scale.len())));
    }
    if scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::config("evaluation scale must be positive"));
    }
    if !(failure_threshold > 0.0) {
        return Err(Error::config("failure threshold must be positive"));
    }
    let d = pred.cols();
    for g in groups {
        if g.start >= g.end || g.end > d {
            return Err(Error::Shape(format!("landmark group {g:?} outside {d} coordinates")));
        }
    }

    let (mut abs, mut sq) = (0.0, 0.0);
    let mut per_group = vec![0.0; groups.len()];
    let mut failures = 0usize;
    for i in 0..n {
        let (p, t) = (pred.row(i), truth.row(i));
        for (a, b) in p.iter().zip(t) {
            let e = a - b;
            abs += e.abs();
            sq += e * e;
        }
        for (k, g) in groups.iter().enumerate() {
            let mut dist = 0.0;
            for c in g.clone() {
                let e = p[c] - t[c];
                per_group[k] += e.abs();
                dist += e * e;
            }
            if dist.sqrt() / scale[i] > failure_threshold {
                failures += 1;
            }
        }
    }
    let count = (n * d) as f64;
    for (k, g) in groups.iter().enumerate() {
        per_group[k] /= (n * g.len()) as f64;
    }
    Ok(MetricReport {
        n,
        mae: abs / count,
        rmse: (sq / count).sqrt(),
        failure_rate: if groups.is_empty() { 0.0 } else { failures as f64 / (n * groups.len()) as f64 },
        per_landmark_mae: per_group,
        precision: None,
        recall: None,
    })
}

/// Mean absolute error of each sample, the paired unit for significance tests.
pub fn sample_errors(pred: &Matrix<f64>, truth: &Matrix<f64>) -> Result<Vec<f64>> {
    check_pair(pred, truth)?;
    let d = pred.cols() as f64;
    Ok(pred
        .iter_rows()
        .zip(truth.iter_rows())
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / d)
        .collect())
}

/// Precision and recall of outlier predictions.
///
/// Precision is 1 when nothing is predicted, recall is 1 when there is
/// nothing to find.
pub fn precision_recall(predicted: &[bool], truth: &[bool]) -> Result<(f64, f64)> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predicted.len(), truth.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok((ratio(tp, tp + fp), ratio(tp, tp + fn_)))
}
