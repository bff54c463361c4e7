//! Training losses with closed-form gradients.
//!
//! Every loss has a `*_with_grad` form returning the gradient with respect to
//! its first input. Training code feeds these gradients back into the network
//! graph, so the values checked by [`finite_difference_check`] are the ones
//! used for optimization.
//!
//! All reductions run in a fixed sequential order.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::metrics::ccc_stats;
use crate::types::Polarity;

/// Probabilities are clamped this far from 0 and 1 inside the focal loss.
pub const FOCAL_CLAMP: f64 = 1e-7;

/// Below this standard deviation a CCC input counts as constant.
pub const CCC_MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Additive contributions; for composite losses they sum to `value`.
    pub terms: BTreeMap<String, f64>,
}

impl LossValue {
    fn single(name: &str, value: f64) -> Self {
        Self {
            value,
            terms: BTreeMap::from([(name.to_string(), value)]),
        }
    }
}

fn check_rows(n_rows: usize, n_labels: usize, what: &str) -> Result<()> {
    if n_rows == 0 {
        return Err(Error::Shape(format!("{what}: empty batch")));
    }
    if n_rows != n_labels {
        return Err(Error::Shape(format!(
            "{what}: {n_rows} rows but {n_labels} labels"
        )));
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum: f64 = row.iter().sum();
        row.mapv_inplace(|e| e / sum);
    }
    out
}

/// Mean categorical cross-entropy over softmax-normalized logits.
pub fn cross_entropy_with_grad(
    logits: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(LossValue, Array2<f64>)> {
    let (n, k) = logits.dim();
    check_rows(n, labels.len(), "cross_entropy")?;
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Shape(format!("label {bad} with only {k} classes")));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Domain("cross_entropy: non-finite logits".into()));
    }
    let probs = softmax_rows(logits);
    let mut total = 0.0;
    let mut grad = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
        grad[[r, y]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n as f64);
    Ok((LossValue::single("ce", total / n as f64), grad))
}

pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<LossValue> {
    cross_entropy_with_grad(logits, labels).map(|(l, _)| l)
}

/// Three-way polarity cross-entropy for one affect dimension. Columns follow
/// [`Polarity::index`].
pub fn polarity_cross_entropy_with_grad(
    logits: ArrayView2<f64>,
    labels: &[Polarity],
) -> Result<(LossValue, Array2<f64>)> {
    if logits.ncols() != 3 {
        return Err(Error::Shape(format!(
            "polarity logits need 3 columns, got {}",
            logits.ncols()
        )));
    }
    let idx: Vec<usize> = labels.iter().map(|p| p.index()).collect();
    let (loss, grad) = cross_entropy_with_grad(logits, &idx)?;
    Ok((LossValue::single("polarity_ce", loss.value), grad))
}

pub fn polarity_cross_entropy(logits: ArrayView2<f64>, labels: &[Polarity]) -> Result<LossValue> {
    polarity_cross_entropy_with_grad(logits, labels).map(|(l, _)| l)
}

/// `1 − CCC(predictions, targets)` with population statistics, and its
/// gradient with respect to the predictions.
pub fn ccc_loss_with_grad(predictions: &[f64], targets: &[f64]) -> Result<(LossValue, Vec<f64>)> {
    let st = ccc_stats(predictions, targets)?;
    if st.var_pred.sqrt() < CCC_MIN_STD && st.var_target.sqrt() < CCC_MIN_STD {
        return Err(Error::DegenerateInput(
            "ccc_loss: predictions and targets are both constant".into(),
        ));
    }
    let denom = st.denominator();
    let ccc = 2.0 * st.cov / denom;
    let n = predictions.len() as f64;
    // d(2 cov)/dx_i = 2 (y_i − μ_y)/N and d(denom)/dx_i = 2 (x_i − μ_y)/N
    let grad = predictions
        .iter()
        .zip(targets)
        .map(|(&x, &y)| {
            let d_num = 2.0 * (y - st.mean_target) / n;
            let d_den = 2.0 * (x - st.mean_target) / n;
            -(d_num * denom - 2.0 * st.cov * d_den) / (denom * denom)
        })
        .collect();
    Ok((LossValue::single("ccc", 1.0 - ccc), grad))
}

pub fn ccc_loss(predictions: &[f64], targets: &[f64]) -> Result<LossValue> {
    ccc_loss_with_grad(predictions, targets).map(|(l, _)| l)
}

/// Soft multi-class Dice loss.
///
/// Per class `i` present among the labels: `TP_i = Σ p_i` over rows of class
/// `i`, `FP_i = Σ p_i` over other rows, `FN_i = Σ (1 − p_i)` over rows of
/// class `i`. The loss is one minus the mean of `2TP / (2TP + FP + FN)` over
/// present classes. On one-hot rows this is exactly the count formula.
pub fn dice_loss_with_grad(
    probabilities: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(LossValue, Array2<f64>)> {
    let (n, k) = probabilities.dim();
    check_rows(n, labels.len(), "dice_loss")?;
    if k < 2 {
        return Err(Error::Shape(format!("dice_loss needs at least 2 classes, got {k}")));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Shape(format!("label {bad} with only {k} classes")));
    }
    let mut count = vec![0usize; k];
    for &y in labels {
        count[y] += 1;
    }
    let present: Vec<usize> = (0..k).filter(|&c| count[c] > 0).collect();
    if present.is_empty() {
        return Err(Error::DegenerateInput("dice_loss: no class present".into()));
    }
    let m = present.len() as f64;
    let mut grad = Array2::<f64>::zeros((n, k));
    let mut dice_sum = 0.0;
    for &c in &present {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fnn = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let p = probabilities[[r, c]];
            if y == c {
                tp += p;
                fnn += 1.0 - p;
            } else {
                fp += p;
            }
        }
        let den = 2.0 * tp + fp + fnn;
        dice_sum += 2.0 * tp / den;
        // den = Σ_r p_rc + count_c, so ∂den/∂p_rc = 1 for every row
        for (r, &y) in labels.iter().enumerate() {
            let d_num = if y == c { 2.0 } else { 0.0 };
            let d_dice = (d_num * den - 2.0 * tp) / (den * den);
            grad[[r, c]] = -d_dice / m;
        }
    }
    Ok((LossValue::single("dice", 1.0 - dice_sum / m), grad))
}

pub fn dice_loss(probabilities: ArrayView2<f64>, labels: &[usize]) -> Result<LossValue> {
    dice_loss_with_grad(probabilities, labels).map(|(l, _)| l)
}

/// `CE(logits) + λ · Dice(softmax(logits))`, gradient with respect to logits.
pub fn composite_classification_loss_with_grad(
    logits: ArrayView2<f64>,
    labels: &[usize],
    lambda: f64,
) -> Result<(LossValue, Array2<f64>)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be >= 0, got {lambda}")));
    }
    let (ce, mut grad) = cross_entropy_with_grad(logits, labels)?;
    let probs = softmax_rows(logits);
    let (dice, dice_grad_p) = dice_loss_with_grad(probs.view(), labels)?;
    // chain through softmax: ∂z_j = p_j (g_j − Σ_m g_m p_m)
    for ((mut g_row, p_row), gp_row) in grad
        .axis_iter_mut(Axis(0))
        .zip(probs.axis_iter(Axis(0)))
        .zip(dice_grad_p.axis_iter(Axis(0)))
    {
        let dot: f64 = p_row.iter().zip(gp_row.iter()).map(|(p, g)| p * g).sum();
        for ((g, &p), &gp) in g_row.iter_mut().zip(p_row.iter()).zip(gp_row.iter()) {
            *g += lambda * p * (gp - dot);
        }
    }
    let weighted = lambda * dice.value;
    let value = ce.value + weighted;
    let terms = BTreeMap::from([
        ("ce".to_string(), ce.value),
        ("lambda_dice".to_string(), weighted),
    ]);
    Ok((LossValue { value, terms }, grad))
}

pub fn composite_classification_loss(
    logits: ArrayView2<f64>,
    labels: &[usize],
    lambda: f64,
) -> Result<LossValue> {
    composite_classification_loss_with_grad(logits, labels, lambda).map(|(l, _)| l)
}

/// Masked-mean binary focal loss `−α_t (1 − p_t)^γ log p_t`, gradient with
/// respect to the probabilities. Cells with mask 0 contribute nothing.
pub fn focal_loss_with_grad(
    probabilities: ArrayView2<f64>,
    labels: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    alpha: f64,
    gamma: f64,
) -> Result<(LossValue, Array2<f64>)> {
    if probabilities.dim() != labels.dim() || probabilities.dim() != mask.dim() {
        return Err(Error::Shape(format!(
            "focal_loss: probabilities {:?}, labels {:?}, mask {:?}",
            probabilities.dim(),
            labels.dim(),
            mask.dim()
        )));
    }
    if labels.iter().chain(mask.iter()).any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain("focal_loss: labels and mask must be 0/1".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) || gamma.is_nan() || gamma < 0.0 {
        return Err(Error::Domain(format!(
            "focal_loss: alpha {alpha} must lie in (0, 1], gamma {gamma} must be >= 0"
        )));
    }
    let included = mask.iter().filter(|&&m| m == 1.0).count();
    if included == 0 {
        return Err(Error::DegenerateInput("focal_loss: mask excludes every cell".into()));
    }
    let scale = 1.0 / included as f64;
    let mut total = 0.0;
    let mut grad = Array2::<f64>::zeros(probabilities.dim());
    for (((&p_raw, &y), &m), g) in probabilities
        .iter()
        .zip(labels.iter())
        .zip(mask.iter())
        .zip(grad.iter_mut())
    {
        if m == 0.0 {
            continue;
        }
        let p = p_raw.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
        let positive = y == 1.0;
        let (pt, at) = if positive { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
        let modulator = (1.0 - pt).powf(gamma);
        total += -at * modulator * pt.ln();
        let clamped = p != p_raw;
        if !clamped {
            // d/dp_t of −α_t (1−p_t)^γ ln p_t
            let d_mod = if gamma == 0.0 {
                0.0
            } else {
                gamma * (1.0 - pt).powf(gamma - 1.0) * pt.ln()
            };
            let d_pt = at * (d_mod - modulator / pt);
            *g = if positive { d_pt } else { -d_pt } * scale;
        }
    }
    Ok((LossValue::single("focal", total * scale), grad))
}

pub fn focal_loss(
    probabilities: ArrayView2<f64>,
    labels: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    alpha: f64,
    gamma: f64,
) -> Result<LossValue> {
    focal_loss_with_grad(probabilities, labels, mask, alpha, gamma).map(|(l, _)| l)
}

/// Largest elementwise relative error between an analytic gradient and central
/// differences `(f(x + ε) − f(x − ε)) / 2ε`, with relative error measured
/// against `max(|analytic|, 1e-8)`.
pub fn finite_difference_check<F>(loss_fn: F, inputs: &[f64], epsilon: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Domain(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let (_, analytic) = loss_fn(inputs)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    let mut x = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let (plus, _) = loss_fn(&x)?;
        x[i] = orig - epsilon;
        let (minus, _) = loss_fn(&x)?;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
