use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::ops::{softmax_rows, LOG_CLAMP};
use super::Scalar;
use crate::error::{invalid, Error, Result};
use crate::seed::{stream_rng, STREAM_INIT};
use crate::types::DualDataset;

/// Rows per chunk when running inference over a whole dataset.
const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_tsdae: usize,
    pub d_use: usize,
    /// Hidden widths of the TSDAE branch. Empty means the stream feeds the
    /// head directly.
    pub tsdae_hidden: Vec<usize>,
    pub use_hidden: Vec<usize>,
    pub dropout_rate: f64,
    pub n_classes: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelConfig {
    /// Default architecture: two `[512, 256]` branches, ReLU, dropout 0.1.
    pub fn new(d_tsdae: usize, d_use: usize, n_classes: usize) -> Self {
        Self {
            d_tsdae,
            d_use,
            tsdae_hidden: vec![512, 256],
            use_hidden: vec![512, 256],
            dropout_rate: 0.1,
            n_classes,
            activation: Activation::Relu,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_tsdae == 0 || self.d_use == 0 {
            return bad("stream dimensions must be positive".into());
        }
        if self.tsdae_hidden.contains(&0) || self.use_hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        Ok(())
    }

    fn branch_shapes(input: usize, hidden: &[usize]) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(hidden.len());
        let mut fan_in = input;
        for &w in hidden {
            shapes.push((fan_in, w));
            fan_in = w;
        }
        shapes
    }

    /// Width of each branch's output.
    pub fn branch_outputs(&self) -> (usize, usize) {
        (
            self.tsdae_hidden.last().copied().unwrap_or(self.d_tsdae),
            self.use_hidden.last().copied().unwrap_or(self.d_use),
        )
    }

    /// `(fan_in, fan_out)` for every dense layer in declaration order:
    /// TSDAE branch, USE branch, head.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Self::branch_shapes(self.d_tsdae, &self.tsdae_hidden);
        shapes.extend(Self::branch_shapes(self.d_use, &self.use_hidden));
        let (a, b) = self.branch_outputs();
        shapes.push((a + b, self.n_classes));
        shapes
    }
}

/// Dense layer `y = x W + b` with `W` stored `fan_in x fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weights.dim()
    }

    fn apply(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        x.dot(&self.weights) + &self.bias
    }
}

/// Per-layer parameter gradients, same layout as [`Model::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Dense<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    layers: Vec<Dense<T>>,
}

/// Intermediate values of one forward pass, consumed by [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    /// Input of every dense layer in declaration order.
    layer_inputs: Vec<Array2<T>>,
    /// Pre-activations of hidden layers (`None` for the head).
    pre: Vec<Option<Array2<T>>>,
    /// Inverted-dropout multipliers for hidden layers when training.
    masks: Vec<Option<Array2<T>>>,
    pub logits: Array2<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Sign pattern of every hidden pre-activation. Two passes with equal
    /// patterns lie on the same linear piece of the network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.pre
            .iter()
            .flatten()
            .flat_map(|z| z.iter().map(|&v| v > T::zero()))
            .collect()
    }
}

impl<T: Scalar> Model<T> {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, STREAM_INIT);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_in, fan_out), |_| {
                    T::from_f64_lossy(rng.random_range(-bound..bound))
                });
                Dense {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Assembles a model from explicit layers, checking shapes.
    pub fn from_layers(config: ModelConfig, layers: Vec<Dense<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if shapes.len() != layers.len() {
            return invalid(format!(
                "{} layers supplied, configuration needs {}",
                layers.len(),
                shapes.len()
            ));
        }
        for (i, (l, &s)) in layers.iter().zip(&shapes).enumerate() {
            if l.shape() != s || l.bias.len() != s.1 {
                return invalid(format!("layer {i} has shape {:?}, expected {s:?}", l.shape()));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let (i, o) = l.shape();
                    Dense::zeros(i, o)
                })
                .collect(),
        }
    }

    /// Converts parameters to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |v: &T| U::from_f64_lossy(v.as_f64());
        Model {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weights: l.weights.map(conv),
                    bias: l.bias.map(conv),
                })
                .collect(),
        }
    }

    fn check_inputs(&self, t: &ArrayView2<'_, T>, u: &ArrayView2<'_, T>) -> Result<()> {
        if t.ncols() != self.config.d_tsdae {
            return invalid(format!(
                "TSDAE batch has {} columns, model expects {}",
                t.ncols(),
                self.config.d_tsdae
            ));
        }
        if u.ncols() != self.config.d_use {
            return invalid(format!(
                "USE batch has {} columns, model expects {}",
                u.ncols(),
                self.config.d_use
            ));
        }
        if t.nrows() != u.nrows() {
            return invalid(format!(
                "stream batches have {} and {} rows",
                t.nrows(),
                u.nrows()
            ));
        }
        Ok(())
    }

    /// Logits for a batch. `dropout` switches on training mode; `None` is a
    /// deterministic evaluation pass.
    pub fn forward(
        &self,
        t: ArrayView2<'_, T>,
        u: ArrayView2<'_, T>,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Array2<T>> {
        Ok(self.forward_cached(t, u, dropout)?.logits)
    }

    pub fn forward_cached(
        &self,
        t: ArrayView2<'_, T>,
        u: ArrayView2<'_, T>,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<ForwardCache<T>> {
        self.check_inputs(&t, &u)?;
        let n_layers = self.layers.len();
        let mut cache = ForwardCache {
            layer_inputs: Vec::with_capacity(n_layers),
            pre: Vec::with_capacity(n_layers),
            masks: Vec::with_capacity(n_layers),
            logits: Array2::zeros((0, 0)),
        };
        let split = self.config.tsdae_hidden.len();
        let t_out = self.branch_forward(t, 0..split, dropout.as_deref_mut(), &mut cache);
        let u_out = self.branch_forward(u, split..n_layers - 1, dropout, &mut cache);
        let joined = concatenate(Axis(1), &[t_out.view(), u_out.view()])
            .expect("branch outputs share row count");
        let head = &self.layers[n_layers - 1];
        cache.logits = head.apply(joined.view());
        cache.layer_inputs.push(joined);
        cache.pre.push(None);
        cache.masks.push(None);
        Ok(cache)
    }

    fn branch_forward<R: RngCore + ?Sized>(
        &self,
        input: ArrayView2<'_, T>,
        layers: std::ops::Range<usize>,
        mut dropout: Option<&mut R>,
        cache: &mut ForwardCache<T>,
    ) -> Array2<T> {
        let mut x = input.to_owned();
        let p = self.config.dropout_rate;
        for idx in layers {
            let z = self.layers[idx].apply(x.view());
            let mut a = z.mapv(|v| v.max(T::zero()));
            let mask = match dropout.as_deref_mut() {
                Some(rng) if p > 0.0 => {
                    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
                    let m = Array2::from_shape_fn(a.dim(), |_| {
                        if rng.random::<f64>() < p {
                            T::zero()
                        } else {
                            keep
                        }
                    });
                    a = a * &m;
                    Some(m)
                }
                _ => None,
            };
            cache.layer_inputs.push(std::mem::replace(&mut x, a));
            cache.pre.push(Some(z));
            cache.masks.push(mask);
        }
        x
    }

    /// Softmax cross-entropy loss of the cached pass and its gradient with
    /// respect to every parameter.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        targets: &[usize],
        class_weights: Option<&[T]>,
    ) -> Result<(T, Gradients<T>)> {
        let (rows, classes) = cache.logits.dim();
        if targets.len() != rows {
            return invalid(format!("{} targets for {rows} rows", targets.len()));
        }
        if let Some(w) = class_weights {
            if w.len() != classes {
                return invalid(format!("{} class weights for {classes} classes", w.len()));
            }
        }
        if rows == 0 {
            return invalid("backward on an empty batch");
        }
        let probs = softmax_rows(cache.logits.view());
        let floor = T::from_f64_lossy(LOG_CLAMP);
        let scale = T::one() / T::from_usize(rows).unwrap();
        let mut loss = T::zero();
        let mut d_logits = probs;
        for (mut row, &y) in d_logits.axis_iter_mut(Axis(0)).zip(targets) {
            if y >= classes {
                return invalid(format!("target {y} outside [0, {classes})"));
            }
            let w = class_weights.map_or(T::one(), |w| w[y]);
            let p_y = row[y];
            loss = loss - w * p_y.max(floor).ln();
            if p_y < floor {
                // clamped region: loss is flat in the logits
                row.fill(T::zero());
            } else {
                row[y] = row[y] - T::one();
                row.mapv_inplace(|v| v * w * scale);
            }
        }
        loss = loss * scale;

        let mut grads = self.zero_gradients();
        let n_layers = self.layers.len();
        let head = n_layers - 1;
        grads.layers[head] = layer_grad(&cache.layer_inputs[head], &d_logits);
        let d_joined = d_logits.dot(&self.layers[head].weights.t());
        let (t_width, _) = self.config.branch_outputs();
        let split = self.config.tsdae_hidden.len();
        self.branch_backward(
            d_joined.slice(s![.., ..t_width]).to_owned(),
            0..split,
            cache,
            &mut grads,
        );
        self.branch_backward(
            d_joined.slice(s![.., t_width..]).to_owned(),
            split..head,
            cache,
            &mut grads,
        );
        Ok((loss, grads))
    }

    fn branch_backward(
        &self,
        mut upstream: Array2<T>,
        layers: std::ops::Range<usize>,
        cache: &ForwardCache<T>,
        grads: &mut Gradients<T>,
    ) {
        let first = layers.start;
        for idx in layers.rev() {
            if let Some(m) = &cache.masks[idx] {
                upstream = upstream * m;
            }
            let z = cache.pre[idx].as_ref().expect("hidden layer keeps pre-activation");
            Zip::from(&mut upstream).and(z).for_each(|g, &z| {
                if z <= T::zero() {
                    *g = T::zero();
                }
            });
            grads.layers[idx] = layer_grad(&cache.layer_inputs[idx], &upstream);
            if idx > first {
                upstream = upstream.dot(&self.layers[idx].weights.t());
            }
        }
    }

    /// Eval-mode logits for every row of a dataset, in chunks.
    pub fn logits_for(&self, ds: &DualDataset) -> Result<Array2<T>> {
        let n = ds.len();
        let mut out = Array2::zeros((n, self.config.n_classes));
        let t_all = ds.tsdae.view();
        let u_all = ds.use_.view();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let t = t_all.slice(s![start..end, ..]).mapv(T::from_f32_exact);
            let u = u_all.slice(s![start..end, ..]).mapv(T::from_f32_exact);
            let logits = self.forward(t.view(), u.view(), None)?;
            out.slice_mut(s![start..end, ..]).assign(&logits);
            start = end;
        }
        if n == 0 {
            self.check_inputs(
                &Array2::<T>::zeros((0, ds.d_tsdae())).view(),
                &Array2::<T>::zeros((0, ds.d_use())).view(),
            )?;
        }
        Ok(out)
    }
}

fn layer_grad<T: Scalar>(input: &Array2<T>, d_out: &Array2<T>) -> Dense<T> {
    Dense {
        weights: input.t().dot(d_out),
        bias: d_out.sum_axis(Axis(0)),
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: Scalar>(row: impl IntoIterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v = T::neg_infinity();
    for (i, v) in row.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}
