use ndarray::Zip;

use super::model::{Dense, Gradients, Model};
use super::train::TrainConfig;
use super::Scalar;
use crate::error::{invalid, Result};

/// AdamW moment estimates and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    first: Vec<Dense<T>>,
    second: Vec<Dense<T>>,
    step: u64,
}

impl<T: Scalar> OptState<T> {
    pub fn new(model: &Model<T>) -> Self {
        let zeros = model.zero_gradients().layers;
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update. Weight decay is applied to the parameters directly
/// (`p -= lr * wd * p`) before the bias-corrected Adam step.
pub fn adamw_step<T: Scalar>(
    model: &mut Model<T>,
    grads: &Gradients<T>,
    state: &mut OptState<T>,
    tc: &TrainConfig,
) -> Result<()> {
    let layers = model.layers_mut();
    if grads.layers.len() != layers.len() || state.first.len() != layers.len() {
        return invalid("gradient/optimizer layout does not match the model");
    }
    for (l, g) in layers.iter().zip(&grads.layers) {
        if l.weights.dim() != g.weights.dim() || l.bias.dim() != g.bias.dim() {
            return invalid("gradient shape does not match parameter shape");
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(tc.beta1);
    let b2 = T::from_f64_lossy(tc.beta2);
    let one = T::one();
    let lr = T::from_f64_lossy(tc.learning_rate);
    let decay = one - T::from_f64_lossy(tc.learning_rate * tc.weight_decay);
    let eps = T::from_f64_lossy(tc.epsilon);
    let c1 = T::from_f64_lossy(1.0 - tc.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - tc.beta2.powi(t));

    let update = |p: &mut T, g: &T, m: &mut T, v: &mut T| {
        *m = b1 * *m + (one - b1) * *g;
        *v = b2 * *v + (one - b2) * *g * *g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
    };

    for (i, layer) in layers.iter_mut().enumerate() {
        let g = &grads.layers[i];
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        Zip::from(&mut layer.weights)
            .and(&g.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .for_each(update);
        Zip::from(&mut layer.bias)
            .and(&g.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(update);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{Activation, ModelConfig};
    use ndarray::array;

    fn scalar_model(w: f64) -> Model<f64> {
        // head 2 -> 2; we only look at weight [0, 0]
        let cfg = ModelConfig {
            d_tsdae: 1,
            d_use: 1,
            tsdae_hidden: vec![],
            use_hidden: vec![],
            dropout_rate: 0.0,
            n_classes: 2,
            activation: Activation::Relu,
            seed: 0,
        };
        Model::from_layers(
            cfg,
            vec![Dense {
                weights: array![[w, 0.5], [-0.25, 2.0]],
                bias: array![0.1, -0.3],
            }],
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut m = scalar_model(0.3);
        let before = m.clone();
        let g = m.zero_gradients();
        let mut s = OptState::new(&m);
        let tc = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        adamw_step(&mut m, &g, &mut s, &tc).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn zero_gradient_decays_every_parameter() {
        let mut m = scalar_model(0.3);
        let before = m.clone();
        let g = m.zero_gradients();
        let mut s = OptState::new(&m);
        let tc = TrainConfig {
            learning_rate: 0.01,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        adamw_step(&mut m, &g, &mut s, &tc).unwrap();
        let factor = 1.0 - 0.01 * 0.5;
        for (a, b) in m.layers()[0].weights.iter().zip(&before.layers()[0].weights) {
            assert!((a - b * factor).abs() < 1e-15);
        }
        for (a, b) in m.layers()[0].bias.iter().zip(&before.layers()[0].bias) {
            assert!((a - b * factor).abs() < 1e-15);
        }
    }

    /// First step from w = 0 with g = 1: m = 0.1, v = 0.001, m_hat = 1,
    /// v_hat = 1, w = 0 - 0.1 * 1 / (1 + 1e-8).
    #[test]
    fn first_step_is_sign_step() {
        let mut m = scalar_model(0.0);
        let mut g = m.zero_gradients();
        g.layers[0].weights[[0, 0]] = 1.0;
        let mut s = OptState::new(&m);
        let tc = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        adamw_step(&mut m, &g, &mut s, &tc).unwrap();
        let w = m.layers()[0].weights[[0, 0]];
        assert!((w - (-0.1 / (1.0 + 1e-8))).abs() < 1e-12);
        assert!((w + 0.1).abs() < 1e-6);
        assert_eq!(s.step(), 1);
    }
}
