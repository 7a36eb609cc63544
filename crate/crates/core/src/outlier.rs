//! Out-of-scope training signals.
//!
//! Synthetic outliers are convex combinations `theta * h_beta + (1 - theta) * h_alpha`
//! of two inlier features drawn from different intents. Open-domain
//! outliers are rows of an external embedding pair (for example questions
//! from an open-domain QA corpus) subsampled without replacement.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::embedding::read_embeddings;
use crate::seed::rng_from;
use crate::types::{DualDataset, EmbeddingMatrix, JointFeature};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub theta_min: f64,
    pub theta_max: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 500,
            theta_min: 0.0,
            theta_max: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = 0.0 <= self.theta_min
            && self.theta_min < self.theta_max
            && self.theta_max <= 1.0;
        if !ordered {
            return Err(Error::Config(format!(
                "theta range [{}, {}] must satisfy 0 <= min < max <= 1",
                self.theta_min, self.theta_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// `alpha`/`beta` index rows of the source dataset.
    Synthetic { alpha: usize, beta: usize, theta: f64 },
    /// `row` indexes the open-domain embedding files.
    OpenDomain { row: usize },
}

/// Outlier rows for both streams with per-row provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct OutlierBatch {
    pub tsdae: EmbeddingMatrix,
    pub use_: EmbeddingMatrix,
    pub ids: Vec<String>,
    pub provenance: Vec<Provenance>,
}

impl OutlierBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Wraps a pair of aligned open-domain matrices.
    pub fn open_domain(tsdae: EmbeddingMatrix, use_: EmbeddingMatrix) -> Result<Self> {
        if tsdae.count() != use_.count() {
            return invalid(format!(
                "open-domain streams have {} and {} rows",
                tsdae.count(),
                use_.count()
            ));
        }
        let n = tsdae.count();
        Ok(Self {
            tsdae,
            use_,
            ids: (0..n).map(|r| format!("open:{r}")).collect(),
            provenance: (0..n).map(|row| Provenance::OpenDomain { row }).collect(),
        })
    }

    /// Rows at the given positions, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            tsdae: self.tsdae.select(rows),
            use_: self.use_.select(rows),
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            provenance: rows.iter().map(|&r| self.provenance[r].clone()).collect(),
        }
    }

    /// Seeded uniform sample of `count` rows without replacement, kept in
    /// ascending row order.
    pub fn subsample(&self, count: usize, seed: u64) -> Result<Self> {
        if count > self.len() {
            return invalid(format!(
                "requested {count} outliers, only {} available",
                self.len()
            ));
        }
        let mut rows = index::sample(&mut rng_from(seed), self.len(), count).into_vec();
        rows.sort_unstable();
        Ok(self.select(&rows))
    }
}

/// Convex combination of two equal-length slices.
///
/// The endpoints return the corresponding input bit-for-bit and every
/// component stays within the interval spanned by its sources.
fn mix_into(out: &mut Vec<f32>, alpha: &[f32], beta: &[f32], theta: f64) {
    if theta == 0.0 {
        out.extend_from_slice(alpha);
        return;
    }
    if theta == 1.0 {
        out.extend_from_slice(beta);
        return;
    }
    out.extend(alpha.iter().zip(beta).map(|(&a, &b)| {
        let v = (theta * f64::from(b) + (1.0 - theta) * f64::from(a)) as f32;
        v.clamp(a.min(b), a.max(b))
    }));
}

pub fn synthesize_one(h_alpha: &JointFeature, h_beta: &JointFeature, theta: f64) -> Result<JointFeature> {
    if h_alpha.dim() != h_beta.dim() {
        return invalid(format!(
            "cannot mix features of dimension {} and {}",
            h_alpha.dim(),
            h_beta.dim()
        ));
    }
    if !(0.0..=1.0).contains(&theta) {
        return invalid(format!("theta {theta} outside [0, 1]"));
    }
    let mut out = Vec::with_capacity(h_alpha.dim());
    mix_into(&mut out, h_alpha.as_slice(), h_beta.as_slice(), theta);
    Ok(JointFeature(out))
}

/// `sc.count` synthetic outliers from cross-intent pairs of `ds` rows.
///
/// Pairs are drawn by picking a class uniformly, a different class
/// uniformly, then one row uniformly inside each. Rows labelled OOS are
/// never used as sources. Both streams are mixed with the same theta.
pub fn generate_synthetic(ds: &DualDataset, sc: &SynthConfig) -> Result<OutlierBatch> {
    sc.validate()?;
    let oos = ds.label_map.oos_index();
    let mut by_class: Vec<(usize, Vec<usize>)> = Vec::new();
    for c in ds.distinct_labels().into_iter().filter(|&c| c != oos) {
        let rows = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        by_class.push((c, rows));
    }
    if by_class.len() < 2 {
        return Err(Error::InsufficientClasses {
            found: by_class.len(),
        });
    }

    let mut rng = rng_from(sc.seed);
    let (dt, du) = (ds.d_tsdae(), ds.d_use());
    let mut t_vals = Vec::with_capacity(sc.count * dt);
    let mut u_vals = Vec::with_capacity(sc.count * du);
    let mut ids = Vec::with_capacity(sc.count);
    let mut provenance = Vec::with_capacity(sc.count);
    let n_classes = by_class.len();
    for i in 0..sc.count {
        let ca = rng.random_range(0..n_classes);
        let mut cb = rng.random_range(0..n_classes - 1);
        if cb >= ca {
            cb += 1;
        }
        let rows_a = &by_class[ca].1;
        let rows_b = &by_class[cb].1;
        let alpha = rows_a[rng.random_range(0..rows_a.len())];
        let beta = rows_b[rng.random_range(0..rows_b.len())];
        let theta = rng.random_range(sc.theta_min..=sc.theta_max);
        mix_into(&mut t_vals, ds.tsdae.row(alpha), ds.tsdae.row(beta), theta);
        mix_into(&mut u_vals, ds.use_.row(alpha), ds.use_.row(beta), theta);
        ids.push(format!("syn:{}:{i}", sc.seed));
        provenance.push(Provenance::Synthetic { alpha, beta, theta });
    }
    Ok(OutlierBatch {
        tsdae: EmbeddingMatrix::new(dt, t_vals)?,
        use_: EmbeddingMatrix::new(du, u_vals)?,
        ids,
        provenance,
    })
}

/// Reads an aligned open-domain embedding pair and samples `count` rows.
pub fn load_open_domain(
    tsdae_file: impl AsRef<Path>,
    use_file: impl AsRef<Path>,
    count: usize,
    seed: u64,
) -> Result<OutlierBatch> {
    let t = read_embeddings(tsdae_file)?;
    let u = read_embeddings(use_file)?;
    OutlierBatch::open_domain(t, u)?.subsample(count, seed)
}

/// Appends every outlier row to `train`, labelled as OOS.
pub fn merge_outliers(train: &DualDataset, batches: &[OutlierBatch]) -> Result<DualDataset> {
    let mut out = train.clone();
    let oos = train.label_map.oos_index();
    for (b, batch) in batches.iter().enumerate() {
        if batch.tsdae.dim() != train.d_tsdae() || batch.use_.dim() != train.d_use() {
            return invalid(format!(
                "outlier batch {b} has dims {}/{}, dataset has {}/{}",
                batch.tsdae.dim(),
                batch.use_.dim(),
                train.d_tsdae(),
                train.d_use()
            ));
        }
        out.tsdae.append(&batch.tsdae)?;
        out.use_.append(&batch.use_)?;
        out.labels.extend(std::iter::repeat_n(oos, batch.len()));
        out.ids.extend(batch.ids.iter().cloned());
    }
    if !batches.is_empty() {
        out.splits = None;
    }
    Ok(out)
}
