use ndarray::{Array2, ArrayView2, Axis};

use super::Scalar;
use crate::error::{invalid, Result};

/// Floor applied to probabilities before taking the log in the loss.
pub const LOG_CLAMP: f64 = 1e-12;

/// Max-subtracted softmax of one logit vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return invalid("softmax of an empty vector");
    }
    if logits.iter().any(|v| v.is_nan()) {
        return invalid("softmax input contains NaN");
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return invalid("softmax input must be finite");
    }
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Row-wise softmax. Rows are assumed finite (the network only produces
/// finite logits from finite inputs).
pub fn softmax_rows<T: Scalar>(logits: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().copied().fold(T::zero(), |a, b| a + b);
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean over rows of `-w[y] * ln(max(p[y], 1e-12))`.
pub fn cross_entropy_loss<T: Scalar>(
    probs: ArrayView2<'_, T>,
    targets: &[usize],
    class_weights: Option<&[T]>,
) -> Result<T> {
    let (rows, classes) = probs.dim();
    if targets.len() != rows {
        return invalid(format!("{} targets for {rows} rows", targets.len()));
    }
    if let Some(w) = class_weights {
        if w.len() != classes {
            return invalid(format!("{} class weights for {classes} classes", w.len()));
        }
    }
    if rows == 0 {
        return Ok(T::zero());
    }
    let floor = T::from_f64_lossy(LOG_CLAMP).ln();
    let mut total = T::zero();
    for (row, &y) in probs.axis_iter(Axis(0)).zip(targets) {
        if y >= classes {
            return invalid(format!("target {y} outside [0, {classes})"));
        }
        let w = class_weights.map_or(T::one(), |w| w[y]);
        total = total - w * row[y].ln().max(floor);
    }
    Ok(total / T::from_usize(rows).unwrap())
}
