//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::time::{Duration, Instant};

use deter::nn::{Model, ModelConfig};
use deter::types::{DualDataset, EmbeddingMatrix, IntentLabelMap, Split};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRADCHECK_STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so that two vanishing
/// gradients do not turn rounding noise into a large ratio.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Mean weighted cross-entropy from raw logits, computed from scratch.
pub fn loss_oracle(logits: &Array2<f64>, targets: &[usize], weights: Option<&[f64]>) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(targets) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let w = weights.map_or(1.0, |w| w[y]);
        total += w * (log_z - row[y]);
    }
    total / targets.len() as f64
}

#[derive(Debug)]
pub struct GradcheckCase {
    pub config: ModelConfig,
    pub t: Array2<f64>,
    pub u: Array2<f64>,
    pub targets: Vec<usize>,
    pub weights: Option<Vec<f64>>,
}

pub fn random_case(seed: u64) -> GradcheckCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..rng.random_range(0..=2)).map(|_| rng.random_range(1..=8)).collect()
    };
    let d_tsdae = rng.random_range(1..=16);
    let d_use = rng.random_range(1..=16);
    let n_classes = rng.random_range(2..=5);
    let config = ModelConfig {
        tsdae_hidden: hidden(&mut rng),
        use_hidden: hidden(&mut rng),
        dropout_rate: if rng.random_bool(0.5) { 0.25 } else { 0.0 },
        seed: rng.random(),
        ..ModelConfig::new(d_tsdae, d_use, n_classes)
    };
    let rows = rng.random_range(1..=6);
    let t = Array2::from_shape_fn((rows, d_tsdae), |_| rng.random_range(-2.0..2.0));
    let u = Array2::from_shape_fn((rows, d_use), |_| rng.random_range(-2.0..2.0));
    let targets = (0..rows).map(|_| rng.random_range(0..n_classes)).collect();
    let weights = rng
        .random_bool(0.5)
        .then(|| (0..n_classes).map(|_| rng.random_range(0.5..2.0)).collect());
    GradcheckCase {
        config,
        t,
        u,
        targets,
        weights,
    }
}

#[derive(Debug, Default)]
pub struct GradcheckOutcome {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates where a ReLU changed side between the two probes.
    pub skipped: usize,
}

/// Central differences against backprop over every parameter. Dropout
/// masks are held fixed by reseeding the mask generator for every pass.
pub fn gradcheck(case: &GradcheckCase) -> GradcheckOutcome {
    let base: Model<f64> = Model::init(case.config.clone()).unwrap();
    let mask_seed = case.config.seed ^ 0xD0;
    let run = |m: &Model<f64>| {
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        m.forward_cached(case.t.view(), case.u.view(), Some(&mut rng)).unwrap()
    };
    let cache = run(&base);
    let (_, grads) = base.backward(&cache, &case.targets, case.weights.as_deref()).unwrap();
    let pattern = cache.activation_pattern();

    let mut out = GradcheckOutcome::default();
    for layer in 0..base.layers().len() {
        let (fan_in, fan_out) = base.layers()[layer].shape();
        let coords = (0..fan_in * fan_out).map(|k| (Some(k / fan_out), k % fan_out));
        let coords = coords.chain((0..fan_out).map(|j| (None, j)));
        for (row, col) in coords {
            let probe = |delta: f64| {
                let mut m = base.clone();
                let d = &mut m.layers_mut()[layer];
                match row {
                    Some(r) => d.weights[[r, col]] += delta,
                    None => d.bias[col] += delta,
                }
                let c = run(&m);
                let loss = loss_oracle(&c.logits, &case.targets, case.weights.as_deref());
                (loss, c.activation_pattern())
            };
            let (lp, pp) = probe(GRADCHECK_STEP);
            let (lm, pm) = probe(-GRADCHECK_STEP);
            if pp != pattern || pm != pattern {
                out.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * GRADCHECK_STEP);
            let g = &grads.layers[layer];
            let analytic = match row {
                Some(r) => g.weights[[r, col]],
                None => g.bias[col],
            };
            let denom = analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            out.max_rel_error = out.max_rel_error.max((analytic - numeric).abs() / denom);
            out.checked += 1;
        }
    }
    out
}

/// Brute-force F1 of one class straight from the label vectors.
pub fn f1_oracle(gold: &[usize], pred: &[usize], class: usize) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&g, &p) in gold.iter().zip(pred) {
        match (g == class, p == class) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Corpus with the requested per-intent split sizes and constant 2/1-d
/// embeddings; only the bookkeeping matters.
pub fn shaped_corpus(n_intents: usize, per: (usize, usize, usize)) -> DualDataset {
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut ids = Vec::new();
    for i in 0..n_intents {
        for (s, c) in [(Split::Train, per.0), (Split::Val, per.1), (Split::Test, per.2)] {
            for j in 0..c {
                labels.push(i);
                splits.push(s);
                ids.push(format!("{i}/{}/{j}", s.as_str()));
            }
        }
    }
    let n = labels.len();
    let t = (0..2 * n).map(|k| (k % 7) as f32).collect();
    let u = (0..n).map(|k| (k % 5) as f32).collect();
    DualDataset {
        tsdae: EmbeddingMatrix::new(2, t).unwrap(),
        use_: EmbeddingMatrix::new(1, u).unwrap(),
        labels,
        ids,
        splits: Some(splits),
        label_map: IntentLabelMap::new((0..n_intents).map(|i| format!("intent{i}")).collect()).unwrap(),
    }
}

/// Rows of real OOS utterances, labelled OOS, without split tags.
pub fn oos_rows(count: usize) -> DualDataset {
    DualDataset {
        tsdae: EmbeddingMatrix::new(2, vec![0.5; 2 * count]).unwrap(),
        use_: EmbeddingMatrix::new(1, vec![0.5; count]).unwrap(),
        labels: vec![0; count],
        ids: (0..count).map(|i| format!("ext-oos/{i}")).collect(),
        splits: None,
        label_map: IntentLabelMap::new(vec![]).unwrap(),
    }
}

pub fn timed<R>(f: impl FnOnce() -> R) -> (R, Duration) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed())
}

/// Every file under `dir` as (relative path, bytes), sorted by path.
pub fn snapshot(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
