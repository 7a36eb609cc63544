//! Synthetic dual-stream corpora: Gaussian clusters around unit-norm
//! intent centres, one independent centre set per stream.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::embedding::write_embeddings;
use super::manifest::{DatasetManifest, ManifestRecord};
use crate::error::{Error, Result};
use crate::seed::stream_rng;
use crate::types::{EmbeddingMatrix, Split};

const MAX_CENTRE_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyGenConfig {
    pub n_intents: usize,
    pub train_per_intent: usize,
    pub val_per_intent: usize,
    pub test_per_intent: usize,
    pub d_tsdae: usize,
    pub d_use: usize,
    /// Minimum distance between centres, in units of `noise_sigma`.
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ToyGenConfig {
    fn default() -> Self {
        Self {
            n_intents: 10,
            train_per_intent: 20,
            val_per_intent: 5,
            test_per_intent: 5,
            d_tsdae: 32,
            d_use: 16,
            separation: 10.0,
            noise_sigma: 0.005,
            seed: 0,
        }
    }
}

impl ToyGenConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.n_intents > 0
            && self.train_per_intent > 0
            && self.val_per_intent > 0
            && self.test_per_intent > 0
            && self.d_tsdae > 0
            && self.d_use > 0;
        if !positive {
            return Err(Error::Config("toy counts and dimensions must be positive".into()));
        }
        if !(self.separation > 0.0 && self.noise_sigma > 0.0) {
            return Err(Error::Config("separation and noise_sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn rows_per_intent(&self) -> usize {
        self.train_per_intent + self.val_per_intent + self.test_per_intent
    }
}

/// Generated corpus: both embedding matrices plus a manifest whose file
/// names are `tsdae.detb` / `use.detb`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyData {
    pub tsdae: EmbeddingMatrix,
    pub use_: EmbeddingMatrix,
    pub manifest: DatasetManifest,
}

impl ToyData {
    /// Writes the three files into `dir`; returns the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<std::path::PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_embeddings(&self.tsdae, dir.join(&self.manifest.tsdae_file))?;
        write_embeddings(&self.use_, dir.join(&self.manifest.use_file))?;
        let path = dir.join("manifest.tsv");
        self.manifest.write(&path)?;
        Ok(path)
    }
}

pub fn intent_name(i: usize) -> String {
    format!("intent_{i:03}")
}

fn centres(n: usize, dim: usize, min_dist: f64, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut placed = false;
        for _ in 0..MAX_CENTRE_ATTEMPTS {
            let mut v: Vec<f64> = (0..dim).map(|_| std_normal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            let far = out.iter().all(|c| {
                c.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= min_dist
            });
            if far {
                out.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place centre {i} of {n} at distance {min_dist} in {dim} dimensions"
            )));
        }
    }
    Ok(out)
}

/// Generates the corpus. Rows are intent-major; within an intent, train
/// rows precede val rows, which precede test rows.
pub fn gen_toy(cfg: &ToyGenConfig) -> Result<ToyData> {
    cfg.validate()?;
    let min_dist = cfg.separation * cfg.noise_sigma;
    let mut rng = stream_rng(cfg.seed, 0x70_79);
    let t_centres = centres(cfg.n_intents, cfg.d_tsdae, min_dist, &mut rng)?;
    let u_centres = centres(cfg.n_intents, cfg.d_use, min_dist, &mut rng)?;
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::Config(format!("noise: {e}")))?;

    let n = cfg.n_intents * cfg.rows_per_intent();
    let mut t_vals = Vec::with_capacity(n * cfg.d_tsdae);
    let mut u_vals = Vec::with_capacity(n * cfg.d_use);
    let mut records = Vec::with_capacity(n);
    for intent in 0..cfg.n_intents {
        let name = intent_name(intent);
        let parts = [
            (Split::Train, cfg.train_per_intent),
            (Split::Val, cfg.val_per_intent),
            (Split::Test, cfg.test_per_intent),
        ];
        for (split, count) in parts {
            for k in 0..count {
                for c in &t_centres[intent] {
                    t_vals.push((c + noise.sample(&mut rng)) as f32);
                }
                for c in &u_centres[intent] {
                    u_vals.push((c + noise.sample(&mut rng)) as f32);
                }
                records.push(ManifestRecord {
                    id: format!("{name}-{}-{k:04}", split.as_str()),
                    intent: name.clone(),
                    split: Some(split),
                    row: records.len(),
                });
            }
        }
    }
    Ok(ToyData {
        tsdae: EmbeddingMatrix::new(cfg.d_tsdae, t_vals)?,
        use_: EmbeddingMatrix::new(cfg.d_use, u_vals)?,
        manifest: DatasetManifest {
            tsdae_file: "tsdae.detb".into(),
            use_file: "use.detb".into(),
            d_tsdae: cfg.d_tsdae,
            d_use: cfg.d_use,
            labels: Some((0..cfg.n_intents).map(intent_name).collect()),
            records,
        },
    })
}
