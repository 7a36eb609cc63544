use std::borrow::Cow;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{argmax, Model};
use super::optim::{adamw_step, OptState};
use super::Scalar;
use crate::error::{invalid, Error, Result};
use crate::seed::{stream_rng, STREAM_DROPOUT, STREAM_SHUFFLE};
use crate::types::DualDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Per-class loss weights, one per class including OOS.
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 200,
            max_epochs: 1000,
            patience: 100,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            class_weights: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.patience > self.max_epochs {
            return bad("patience cannot exceed max_epochs");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return bad("class weights must be positive");
            }
        }
        Ok(())
    }
}

/// Per-epoch record of a training run. Epochs are numbered from 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_accuracy(&self) -> f64 {
        self.val_accuracy
            .get(self.best_epoch.wrapping_sub(1))
            .copied()
            .unwrap_or(0.0)
    }

    /// Tab-separated `epoch  train_loss  val_accuracy` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_accuracy\n");
        for (i, (l, a)) in self.train_loss.iter().zip(&self.val_accuracy).enumerate() {
            s.push_str(&format!("{}\t{l}\t{a}\n", i + 1));
        }
        s.push_str(&format!(
            "# best_epoch={} stopped_epoch={}\n",
            self.best_epoch, self.stopped_epoch
        ));
        s
    }
}

/// Fraction of rows whose eval-mode argmax equals the label.
pub fn accuracy<T: Scalar>(model: &Model<T>, ds: &DualDataset) -> Result<f64> {
    if ds.is_empty() {
        return invalid("accuracy of an empty dataset");
    }
    let logits = model.logits_for(ds)?;
    let correct = logits
        .axis_iter(Axis(0))
        .zip(&ds.labels)
        .filter(|(row, &y)| argmax(row.iter().copied()) == y)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Early-stopped training; see [`train_with`].
pub fn train<T: Scalar>(
    model: Model<T>,
    train: &DualDataset,
    val: &DualDataset,
    tc: &TrainConfig,
) -> Result<(Model<T>, TrainHistory)> {
    train_with(model, train, val, tc, |_| Ok(None))
}

/// Mini-batch AdamW training with early stopping on validation accuracy.
///
/// Before each epoch `refresh(epoch)` may return a replacement training set
/// (used to regenerate synthetic outliers). Training stops once
/// `max(patience, 1)` consecutive epochs fail to strictly beat the best
/// validation accuracy, or at `max_epochs`. The parameters from the best
/// epoch are returned.
pub fn train_with<T, F>(
    mut model: Model<T>,
    train: &DualDataset,
    val: &DualDataset,
    tc: &TrainConfig,
    mut refresh: F,
) -> Result<(Model<T>, TrainHistory)>
where
    T: Scalar,
    F: FnMut(usize) -> Result<Option<DualDataset>>,
{
    tc.validate()?;
    let k = model.n_classes();
    let weights: Option<Vec<T>> = match &tc.class_weights {
        Some(w) if w.len() != k => {
            return invalid(format!("{} class weights for {k} classes", w.len()))
        }
        Some(w) => Some(w.iter().map(|&v| T::from_f64_lossy(v)).collect()),
        None => None,
    };
    check_split(&model, train, "training")?;
    check_split(&model, val, "validation")?;
    if val.is_empty() {
        return invalid("validation set is empty");
    }

    let mut shuffle_rng = stream_rng(tc.seed, STREAM_SHUFFLE);
    let mut dropout_rng = stream_rng(tc.seed, STREAM_DROPOUT);
    let mut state = OptState::new(&model);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model<T>)> = None;
    let wait_limit = tc.patience.max(1);
    let mut current: Cow<'_, DualDataset> = Cow::Borrowed(train);

    for epoch in 1..=tc.max_epochs {
        if let Some(fresh) = refresh(epoch)? {
            check_split(&model, &fresh, "training")?;
            current = Cow::Owned(fresh);
        }
        let ds = current.as_ref();
        let t_all = ds.tsdae.view();
        let u_all = ds.use_.view();
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let t: Array2<T> = t_all.select(Axis(0), chunk).mapv(T::from_f32_exact);
            let u: Array2<T> = u_all.select(Axis(0), chunk).mapv(T::from_f32_exact);
            let targets: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let cache = model.forward_cached(t.view(), u.view(), Some(&mut dropout_rng))?;
            let (loss, grads) = model.backward(&cache, &targets, weights.as_deref())?;
            adamw_step(&mut model, &grads, &mut state, tc)?;
            loss_sum += loss.as_f64() * chunk.len() as f64;
        }
        history.train_loss.push(loss_sum / ds.len() as f64);

        let acc = accuracy(&model, val)?;
        history.val_accuracy.push(acc);
        history.stopped_epoch = epoch;
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, model.clone()));
            history.best_epoch = epoch;
        } else if epoch - history.best_epoch >= wait_limit {
            break;
        }
    }
    let (_, best_model) = best.expect("at least one epoch runs");
    Ok((best_model, history))
}

fn check_split<T: Scalar>(model: &Model<T>, ds: &DualDataset, what: &str) -> Result<()> {
    let cfg = model.config();
    if ds.d_tsdae() != cfg.d_tsdae || ds.d_use() != cfg.d_use {
        return invalid(format!(
            "{what} dims {}/{} do not match model {}/{}",
            ds.d_tsdae(),
            ds.d_use(),
            cfg.d_tsdae,
            cfg.d_use
        ));
    }
    if let Some(&bad) = ds.labels.iter().find(|&&y| y >= cfg.n_classes) {
        return invalid(format!("{what} label {bad} outside model classes"));
    }
    if what == "training" {
        if ds.is_empty() {
            return invalid("training set is empty");
        }
        if ds.distinct_labels().len() < 2 {
            return invalid("training labels cover fewer than 2 classes");
        }
    }
    Ok(())
}
