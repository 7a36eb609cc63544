//! Confidence-threshold reclassification and threshold calibration.
//!
//! A prediction whose top probability falls below the threshold is moved to
//! the OOS class. A model that already predicts OOS is never overruled.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::{confusion_matrix, f1_scores};
use crate::nn::{argmax, softmax_rows, Model, Scalar};
use crate::types::DualDataset;

const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Threshold(f64);

impl Threshold {
    pub const ZERO: Threshold = Threshold(0.0);

    pub fn new(v: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&v) {
            Ok(Self(v))
        } else {
            invalid(format!("threshold {v} outside [0, 1]"))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Threshold {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Threshold> for f64 {
    fn from(t: Threshold) -> f64 {
        t.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    Fixed,
    #[default]
    GridSearch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Mean F1 over the known classes and OOS.
    #[default]
    MacroF1All,
    MacroF1Known,
    ValAccuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdPolicy {
    pub threshold: Threshold,
    pub calibration: Calibration,
    pub grid_step: f64,
    pub objective: Objective,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self {
            threshold: Threshold(0.7),
            calibration: Calibration::default(),
            grid_step: 0.01,
            objective: Objective::default(),
        }
    }
}

impl ThresholdPolicy {
    /// Grid points `i / n` for `i = 0..=n`, with `n = 1 / grid_step`.
    pub fn grid(&self) -> Result<Vec<f64>> {
        let n = (1.0 / self.grid_step).round();
        if !(self.grid_step > 0.0) || !(1.0..=1e6).contains(&n) || (n * self.grid_step - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "grid_step {} must divide 1 evenly",
                self.grid_step
            )));
        }
        let n = n as usize;
        Ok((0..=n).map(|i| i as f64 / n as f64).collect())
    }
}

/// Reclassifies one probability vector; the last index is OOS.
pub fn reclassify(probs: &[f64], threshold: Threshold) -> Result<usize> {
    if probs.len() < 2 {
        return invalid("need at least one known class plus OOS");
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return invalid("probabilities must be finite and non-negative");
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return invalid(format!("probabilities sum to {sum}"));
    }
    Ok(reclassify_unchecked(probs, threshold.0))
}

fn reclassify_unchecked(probs: &[f64], t: f64) -> usize {
    let oos = probs.len() - 1;
    let top = argmax(probs.iter().copied());
    if top == oos || probs[top] >= t {
        top
    } else {
        oos
    }
}

pub fn reclassify_all(probs: ArrayView2<'_, f64>, threshold: Threshold) -> Result<Vec<usize>> {
    probs
        .rows()
        .into_iter()
        .map(|r| reclassify(&r.to_vec(), threshold))
        .collect()
}

/// Eval-mode class probabilities, computed in f64.
pub fn probabilities<T: Scalar>(model: &Model<T>, ds: &DualDataset) -> Result<Array2<f64>> {
    let logits = model.logits_for(ds)?.mapv(|v| v.as_f64());
    Ok(softmax_rows(logits.view()))
}

pub fn predict<T: Scalar>(model: &Model<T>, ds: &DualDataset, threshold: Threshold) -> Result<Vec<usize>> {
    reclassify_all(probabilities(model, ds)?.view(), threshold)
}

fn score(objective: Objective, gold: &[usize], pred: &[usize], n: usize) -> Result<f64> {
    let cm = confusion_matrix(gold, pred, n)?;
    let f1 = f1_scores(&cm);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    Ok(match objective {
        Objective::MacroF1All => mean(&f1),
        Objective::MacroF1Known => mean(&f1[..n - 1]),
        Objective::ValAccuracy => {
            if cm.total() == 0 {
                0.0
            } else {
                cm.trace() as f64 / cm.total() as f64
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibrated {
    pub threshold: Threshold,
    /// (threshold, objective) for every grid point.
    pub curve: Vec<(f64, f64)>,
}

impl Calibrated {
    pub fn curve_tsv(&self) -> String {
        let mut s = String::from("threshold\tobjective\n");
        for (t, v) in &self.curve {
            s.push_str(&format!("{t}\t{v}\n"));
        }
        s
    }
}

/// Grid search over the policy's grid; ties go to the smallest threshold.
/// With `Calibration::Fixed` the curve is still computed but the policy's
/// threshold is returned unchanged.
pub fn calibrate_probs(probs: ArrayView2<'_, f64>, gold: &[usize], policy: &ThresholdPolicy) -> Result<Calibrated> {
    let n = probs.ncols();
    if probs.nrows() != gold.len() {
        return invalid(format!("{} probability rows vs {} labels", probs.nrows(), gold.len()));
    }
    if gold.is_empty() {
        return invalid("calibration set is empty");
    }
    // validate once, then sweep without rechecking
    reclassify_all(probs, Threshold::ZERO)?;
    let rows: Vec<Vec<f64>> = probs.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut curve = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for t in policy.grid()? {
        let pred: Vec<usize> = rows.iter().map(|r| reclassify_unchecked(r, t)).collect();
        let v = score(policy.objective, gold, &pred, n)?;
        if v > best.0 {
            best = (v, t);
        }
        curve.push((t, v));
    }
    let threshold = match policy.calibration {
        Calibration::Fixed => policy.threshold,
        Calibration::GridSearch => Threshold(best.1),
    };
    Ok(Calibrated { threshold, curve })
}

pub fn calibrate<T: Scalar>(model: &Model<T>, val: &DualDataset, policy: &ThresholdPolicy) -> Result<Calibrated> {
    calibrate_probs(probabilities(model, val)?.view(), &val.labels, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn t(v: f64) -> Threshold {
        Threshold::new(v).unwrap()
    }

    #[test]
    fn examples() {
        let p = [0.5, 0.3, 0.2];
        assert_eq!(reclassify(&p, t(0.7)).unwrap(), 2);
        assert_eq!(reclassify(&p, t(0.4)).unwrap(), 0);
        assert_eq!(reclassify(&[0.1, 0.1, 0.8], t(0.0)).unwrap(), 2);
        assert_eq!(reclassify(&[0.1, 0.1, 0.8], t(1.0)).unwrap(), 2);
        // ties break to the lower index
        assert_eq!(reclassify(&[0.4, 0.4, 0.2], t(0.3)).unwrap(), 0);
        assert_eq!(reclassify(&[0.5, 0.5], t(0.9)).unwrap(), 1);
        // equality keeps the prediction
        assert_eq!(reclassify(&[0.75, 0.25, 0.0], t(0.75)).unwrap(), 0);
    }

    #[test]
    fn operating_point() {
        assert_eq!(reclassify(&[0.6, 0.3, 0.1], t(0.7)).unwrap(), 2);
        assert_eq!(reclassify(&[0.8, 0.1, 0.1], t(0.7)).unwrap(), 0);
        assert_eq!(reclassify(&[0.25; 4], t(0.3)).unwrap(), 3);
    }

    #[test]
    fn confident_correct_model_calibrates_to_zero() {
        let probs = Array2::from_shape_vec(
            (3, 3),
            vec![0.99, 0.005, 0.005, 0.005, 0.99, 0.005, 0.005, 0.005, 0.99],
        )
        .unwrap();
        let c = calibrate_probs(probs.view(), &[0, 1, 2], &ThresholdPolicy::default()).unwrap();
        assert_eq!(c.threshold, t(0.0));
        assert!(calibrate_probs(Array2::zeros((0, 3)).view(), &[], &ThresholdPolicy::default()).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(reclassify(&[0.5, 0.3], t(0.5)).is_err());
        assert!(reclassify(&[1.0], t(0.5)).is_err());
        assert!(reclassify(&[f64::NAN, 1.0], t(0.5)).is_err());
        assert!(Threshold::new(1.01).is_err());
        assert!(Threshold::new(-0.0).is_ok());
    }

    #[test]
    fn grid_validation() {
        let mut p = ThresholdPolicy::default();
        assert_eq!(p.grid().unwrap().len(), 101);
        p.grid_step = 0.3;
        assert!(p.grid().is_err());
        p.grid_step = 0.25;
        assert_eq!(p.grid().unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn calibration_picks_separating_threshold() {
        // known rows are confident, OOS rows are not
        let probs = Array2::from_shape_vec(
            (4, 3),
            vec![0.9, 0.05, 0.05, 0.05, 0.9, 0.05, 0.5, 0.3, 0.2, 0.3, 0.45, 0.25],
        )
        .unwrap();
        let gold = [0, 1, 2, 2];
        let c = calibrate_probs(probs.view(), &gold, &ThresholdPolicy::default()).unwrap();
        // anything in (0.5, 0.9] separates; smallest grid point is 0.51
        assert!((c.threshold.value() - 0.51).abs() < 1e-12);
        assert_eq!(c.curve.len(), 101);
        let fixed = ThresholdPolicy {
            calibration: Calibration::Fixed,
            ..ThresholdPolicy::default()
        };
        assert_eq!(calibrate_probs(probs.view(), &gold, &fixed).unwrap().threshold, t(0.7));
    }

    #[test]
    fn policy_toml() {
        let p: ThresholdPolicy = toml::from_str("threshold = 0.5\nobjective = \"val_accuracy\"\n").unwrap();
        assert_eq!(p.threshold, t(0.5));
        assert_eq!(p.objective, Objective::ValAccuracy);
        assert!(toml::from_str::<ThresholdPolicy>("threshold = 1.5\n").is_err());
    }

    fn prob_vec() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, 2..8).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn endpoint_laws(p in prob_vec()) {
            let top = argmax(p.iter().copied());
            prop_assert_eq!(reclassify(&p, t(0.0)).unwrap(), top);
            let expect_one = if p[top] >= 1.0 { top } else { p.len() - 1 };
            prop_assert_eq!(reclassify(&p, t(1.0)).unwrap(), expect_one);
        }

        #[test]
        fn kept_known_class_clears_threshold(p in prob_vec(), v in 0.0f64..=1.0) {
            let c = reclassify(&p, t(v)).unwrap();
            prop_assert!(c == p.len() - 1 || p[c] >= v);
        }

        #[test]
        fn monotone_in_threshold(p in prob_vec(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let oos = p.len() - 1;
            if reclassify(&p, t(lo)).unwrap() == oos {
                prop_assert_eq!(reclassify(&p, t(hi)).unwrap(), oos);
            }
        }
    }
}
