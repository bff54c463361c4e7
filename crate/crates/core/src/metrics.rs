//! Evaluation measures: CCC, per-class and macro F1, mean AU F1, accuracy.
//!
//! Everything is computed in f64 over the full concatenated prediction set.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Task, AU_NAMES, EXPR_NAMES, N_AUS, N_EXPR_CLASSES};

/// CCC denominators below this are treated as degenerate.
pub const CCC_MIN_DENOMINATOR: f64 = 1e-12;

/// Population (1/N) moments of a prediction/target pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CccStats {
    pub mean_pred: f64,
    pub mean_target: f64,
    pub var_pred: f64,
    pub var_target: f64,
    pub cov: f64,
}

impl CccStats {
    /// `σ̂² + σ² + (μ̂ − μ)²`
    pub fn denominator(&self) -> f64 {
        let d = self.mean_pred - self.mean_target;
        self.var_pred + self.var_target + d * d
    }
}

pub fn ccc_stats(predictions: &[f64], targets: &[f64]) -> Result<CccStats> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.len() < 2 {
        return Err(Error::Shape("CCC needs at least 2 samples".into()));
    }
    if predictions.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::Domain("CCC inputs must be finite".into()));
    }
    let n = predictions.len() as f64;
    let mean_pred = predictions.iter().sum::<f64>() / n;
    let mean_target = targets.iter().sum::<f64>() / n;
    let (mut var_pred, mut var_target, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in predictions.iter().zip(targets) {
        let (dx, dy) = (x - mean_pred, y - mean_target);
        var_pred += dx * dx;
        var_target += dy * dy;
        cov += dx * dy;
    }
    Ok(CccStats {
        mean_pred,
        mean_target,
        var_pred: var_pred / n,
        var_target: var_target / n,
        cov: cov / n,
    })
}

/// Concordance correlation coefficient `2ρσ̂σ / (σ̂² + σ² + (μ̂ − μ)²)`.
/// With population moments `ρσ̂σ` is the covariance.
pub fn ccc_metric(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    let st = ccc_stats(predictions, targets)?;
    let denom = st.denominator();
    if denom < CCC_MIN_DENOMINATOR {
        return Err(Error::DegenerateInput(format!(
            "CCC denominator {denom:e} below {CCC_MIN_DENOMINATOR:e}"
        )));
    }
    Ok((2.0 * st.cov / denom).clamp(-1.0, 1.0))
}

fn f1_from_counts(tp: usize, fp: usize, fnn: usize) -> f64 {
    let den = 2 * tp + fp + fnn;
    if den == 0 {
        0.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

/// One-vs-rest F1 per class. A class that is never true and never predicted
/// scores 0.
pub fn f1_per_class(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(bad) = predictions.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(Error::Domain(format!("class {bad} outside 0..{n_classes}")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fnn = vec![0usize; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnn[y] += 1;
        }
    }
    Ok((0..n_classes).map(|c| f1_from_counts(tp[c], fp[c], fnn[c])).collect())
}

/// Mean of the 8 per-class expression F1 scores, always divided by 8.
pub fn f1_final_expr(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    let per = f1_per_class(predictions, labels, N_EXPR_CLASSES)?;
    Ok(per.iter().sum::<f64>() / N_EXPR_CLASSES as f64)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::DegenerateInput("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Binarizes at `threshold` (probability ≥ threshold is positive) and reports
/// positive-class F1 per AU plus their mean.
pub fn mean_f1_au(prob_predictions: ArrayView2<f64>, labels: ArrayView2<f64>, threshold: f64) -> Result<MetricReport> {
    let mask = Array2::ones(labels.dim());
    mean_f1_au_masked(prob_predictions, labels, mask.view(), threshold)
}

/// [`mean_f1_au`] counting only cells whose mask is 1.
pub fn mean_f1_au_masked(
    prob_predictions: ArrayView2<f64>,
    labels: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    threshold: f64,
) -> Result<MetricReport> {
    if prob_predictions.dim() != labels.dim() || mask.dim() != labels.dim() || prob_predictions.ncols() != N_AUS {
        return Err(Error::Shape(format!(
            "AU predictions {:?}, labels {:?} and mask {:?} must all be N x {N_AUS}",
            prob_predictions.dim(),
            labels.dim(),
            mask.dim()
        )));
    }
    if labels.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain("AU labels must be binary".into()));
    }
    let mut per_au_f1 = [0.0; N_AUS];
    for (j, f1) in per_au_f1.iter_mut().enumerate() {
        let (mut tp, mut fp, mut fnn) = (0, 0, 0);
        for ((&p, &y), &m) in prob_predictions
            .column(j)
            .iter()
            .zip(labels.column(j).iter())
            .zip(mask.column(j).iter())
        {
            if m != 1.0 {
                continue;
            }
            match (p >= threshold, y == 1.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                (false, false) => {}
            }
        }
        *f1 = f1_from_counts(tp, fp, fnn);
    }
    let mean_f1 = per_au_f1.iter().sum::<f64>() / N_AUS as f64;
    Ok(MetricReport::Au { per_au_f1, mean_f1 })
}

/// Expression report from hard decisions.
pub fn expr_report(predictions: &[usize], labels: &[usize]) -> Result<MetricReport> {
    let per = f1_per_class(predictions, labels, N_EXPR_CLASSES)?;
    let mut per_class_f1 = [0.0; N_EXPR_CLASSES];
    per_class_f1.copy_from_slice(&per);
    Ok(MetricReport::Expr {
        per_class_f1,
        f1_final: per.iter().sum::<f64>() / N_EXPR_CLASSES as f64,
        accuracy: accuracy(predictions, labels)?,
    })
}

/// VA report from split-level concatenated predictions.
pub fn va_report(
    valence_pred: &[f64],
    valence_true: &[f64],
    arousal_pred: &[f64],
    arousal_true: &[f64],
) -> Result<MetricReport> {
    let ccc_valence = ccc_metric(valence_pred, valence_true)?;
    let ccc_arousal = ccc_metric(arousal_pred, arousal_true)?;
    Ok(MetricReport::Va {
        ccc_valence,
        ccc_arousal,
        mean: (ccc_valence + ccc_arousal) / 2.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum MetricReport {
    Va {
        ccc_valence: f64,
        ccc_arousal: f64,
        mean: f64,
    },
    Expr {
        per_class_f1: [f64; N_EXPR_CLASSES],
        f1_final: f64,
        accuracy: f64,
    },
    Au {
        per_au_f1: [f64; N_AUS],
        mean_f1: f64,
    },
}

impl MetricReport {
    pub fn task(&self) -> Task {
        match self {
            MetricReport::Va { .. } => Task::Va,
            MetricReport::Expr { .. } => Task::Expr,
            MetricReport::Au { .. } => Task::Au,
        }
    }

    /// Headline number: mean CCC, F1-final or mean AU F1.
    pub fn headline(&self) -> f64 {
        match self {
            MetricReport::Va { mean, .. } => *mean,
            MetricReport::Expr { f1_final, .. } => *f1_final,
            MetricReport::Au { mean_f1, .. } => *mean_f1,
        }
    }

    /// Flat key/value view. CCC values appear both raw and ×100.
    pub fn key_values(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        match self {
            MetricReport::Va {
                ccc_valence,
                ccc_arousal,
                mean,
            } => {
                for (k, v) in [("ccc_valence", ccc_valence), ("ccc_arousal", ccc_arousal), ("ccc_mean", mean)] {
                    out.push((k.to_string(), *v));
                    out.push((format!("{k}_x100"), *v * 100.0));
                }
            }
            MetricReport::Expr {
                per_class_f1,
                f1_final,
                accuracy,
            } => {
                for (name, v) in EXPR_NAMES.iter().zip(per_class_f1) {
                    out.push((format!("f1_{}", name.to_ascii_lowercase()), *v));
                }
                out.push(("f1_final".into(), *f1_final));
                out.push(("accuracy".into(), *accuracy));
            }
            MetricReport::Au { per_au_f1, mean_f1 } => {
                for (name, v) in AU_NAMES.iter().zip(per_au_f1) {
                    out.push((format!("f1_{}", name.to_ascii_lowercase()), *v));
                }
                out.push(("mean_f1".into(), *mean_f1));
            }
        }
        out
    }

    /// `key = value` lines, one per metric.
    pub fn to_text(&self) -> String {
        let mut s = format!("task = {}\n", self.task());
        for (k, v) in self.key_values() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
