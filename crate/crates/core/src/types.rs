//! Embedding matrices, label maps and the dual-stream dataset.

use std::collections::HashSet;
use std::fmt;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Name reserved for the out-of-scope class in manifests and label maps.
pub const OOS_NAME: &str = "oos";

/// Row-major `count x dim` block of `f32` values from one encoder stream.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    count: usize,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Checked constructor. `values.len()` must be a multiple of `dim` and
    /// every value finite.
    pub fn new(dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return invalid("embedding dimension must be positive");
        }
        if !values.len().is_multiple_of(dim) {
            return invalid(format!(
                "{} values do not form rows of dimension {dim}",
                values.len()
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return invalid(format!(
                "non-finite value at row {}, column {}",
                pos / dim,
                pos % dim
            ));
        }
        let count = values.len() / dim;
        Ok(Self { dim, count, values })
    }

    /// Builds a matrix without checking any invariant. Callers are expected
    /// to run [`validate_dataset`] on anything assembled this way.
    pub fn from_parts_unchecked(dim: usize, count: usize, values: Vec<f32>) -> Self {
        Self { dim, count, values }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.count, self.dim), &self.values)
            .expect("embedding matrix shape is consistent")
    }

    /// Appends a row. The row must have length `dim`.
    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return invalid(format!(
                "row of length {} pushed into matrix of dimension {}",
                row.len(),
                self.dim
            ));
        }
        self.values.extend_from_slice(row);
        self.count += 1;
        Ok(())
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        Self {
            dim: self.dim,
            count: rows.len(),
            values,
        }
    }

    pub fn append(&mut self, other: &EmbeddingMatrix) -> Result<()> {
        if other.dim != self.dim {
            return invalid(format!(
                "cannot append dimension {} rows to dimension {} matrix",
                other.dim, self.dim
            ));
        }
        self.values.extend_from_slice(&other.values);
        self.count += other.count;
        Ok(())
    }
}

/// Ordered known-intent names. The out-of-scope class is always the index
/// right after the last known intent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentLabelMap {
    names: Vec<String>,
}

impl IntentLabelMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for n in &names {
            if n == OOS_NAME {
                return invalid(format!("intent name {OOS_NAME:?} is reserved"));
            }
            if !seen.insert(n.as_str()) {
                return invalid(format!("duplicate intent name {n:?}"));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Number of known intents, K.
    pub fn known_count(&self) -> usize {
        self.names.len()
    }

    pub fn oos_index(&self) -> usize {
        self.names.len()
    }

    /// K + 1.
    pub fn n_classes(&self) -> usize {
        self.names.len() + 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        if name == OOS_NAME {
            return Some(self.oos_index());
        }
        self.names.iter().position(|n| n == name)
    }

    pub fn name_of(&self, index: usize) -> Option<&str> {
        if index == self.oos_index() {
            Some(OOS_NAME)
        } else {
            self.names.get(index).map(String::as_str)
        }
    }
}

/// Split tag carried by each record of a full corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Aligned TSDAE-stream and USE-stream embeddings with labels and ids.
#[derive(Clone, Debug, PartialEq)]
pub struct DualDataset {
    pub tsdae: EmbeddingMatrix,
    pub use_: EmbeddingMatrix,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    /// Per-record split tags; only full corpora carry them.
    pub splits: Option<Vec<Split>>,
    pub label_map: IntentLabelMap,
}

impl DualDataset {
    /// Empty dataset with the given stream dimensions.
    pub fn empty(d_tsdae: usize, d_use: usize, label_map: IntentLabelMap) -> Self {
        Self {
            tsdae: EmbeddingMatrix::empty(d_tsdae),
            use_: EmbeddingMatrix::empty(d_use),
            labels: Vec::new(),
            ids: Vec::new(),
            splits: None,
            label_map,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_tsdae(&self) -> usize {
        self.tsdae.dim()
    }

    pub fn d_use(&self) -> usize {
        self.use_.dim()
    }

    pub fn joint(&self, i: usize) -> JointFeature {
        let mut h = Vec::with_capacity(self.d_tsdae() + self.d_use());
        h.extend_from_slice(self.tsdae.row(i));
        h.extend_from_slice(self.use_.row(i));
        JointFeature(h)
    }

    /// Sorted distinct labels present.
    pub fn distinct_labels(&self) -> Vec<usize> {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Subset by record position, keeping the label map.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            tsdae: self.tsdae.select(rows),
            use_: self.use_.select(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            splits: self
                .splits
                .as_ref()
                .map(|s| rows.iter().map(|&r| s[r]).collect()),
            label_map: self.label_map.clone(),
        }
    }

    /// Appends `other`'s rows. Both must share stream dimensions; split tags
    /// are dropped unless both sides carry them.
    pub fn append(&mut self, other: &DualDataset) -> Result<()> {
        self.tsdae.append(&other.tsdae)?;
        self.use_.append(&other.use_)?;
        self.labels.extend_from_slice(&other.labels);
        self.ids.extend(other.ids.iter().cloned());
        self.splits = match (self.splits.take(), &other.splits) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            _ => None,
        };
        Ok(())
    }
}

/// Joint dual-encoder feature: TSDAE components followed by USE components.
#[derive(Clone, Debug, PartialEq)]
pub struct JointFeature(pub Vec<f32>);

impl JointFeature {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Stacks a TSDAE vector over a USE vector.
pub fn concat_features(t: &[f32], u: &[f32]) -> Result<JointFeature> {
    if t.is_empty() || u.is_empty() {
        return invalid("both feature streams need a positive dimension");
    }
    if t.iter().chain(u).any(|v| !v.is_finite()) {
        return invalid("features must be finite");
    }
    let mut h = Vec::with_capacity(t.len() + u.len());
    h.extend_from_slice(t);
    h.extend_from_slice(u);
    Ok(JointFeature(h))
}

/// Inverse of [`concat_features`].
pub fn split_feature(h: &JointFeature, d_tsdae: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    if d_tsdae == 0 || d_tsdae >= h.dim() {
        return invalid(format!(
            "split point {d_tsdae} outside (0, {}) for joint feature",
            h.dim()
        ));
    }
    let (t, u) = h.0.split_at(d_tsdae);
    Ok((t.to_vec(), u.to_vec()))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Rule {
    /// A per-record list (or the USE stream) disagrees with the TSDAE row count.
    LengthMismatch {
        field: &'static str,
        expected: usize,
        actual: usize,
    },
    /// Stored values do not equal count x dim.
    ValuesLength {
        stream: &'static str,
        expected: usize,
        actual: usize,
    },
    NonFinite { stream: &'static str },
    LabelOutOfRange { label: usize, max: usize },
}

/// One broken dataset invariant. `id` is set for record-level rules.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub id: Option<String>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(id) = &self.id {
            write!(f, "record {id}: ")?;
        }
        match &self.rule {
            Rule::LengthMismatch {
                field,
                expected,
                actual,
            } => write!(f, "{field} has {actual} entries, expected {expected}"),
            Rule::ValuesLength {
                stream,
                expected,
                actual,
            } => write!(f, "{stream} holds {actual} values, expected {expected}"),
            Rule::NonFinite { stream } => write!(f, "non-finite value in {stream} embedding"),
            Rule::LabelOutOfRange { label, max } => {
                write!(f, "label {label} outside [0, {max}]")
            }
        }
    }
}

/// Checks every [`DualDataset`] invariant and reports each violation.
pub fn validate_dataset(ds: &DualDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = ds.tsdae.count();
    let mut structural = |field, actual| {
        if actual != n {
            out.push(Violation {
                id: None,
                rule: Rule::LengthMismatch {
                    field,
                    expected: n,
                    actual,
                },
            });
        }
    };
    structural("use rows", ds.use_.count());
    structural("labels", ds.labels.len());
    structural("ids", ds.ids.len());
    if let Some(s) = &ds.splits {
        structural("splits", s.len());
    }

    let mut storage_ok = true;
    for (stream, m) in [("tsdae", &ds.tsdae), ("use", &ds.use_)] {
        let expected = m.count() * m.dim();
        if m.values().len() != expected {
            storage_ok = false;
            out.push(Violation {
                id: None,
                rule: Rule::ValuesLength {
                    stream,
                    expected,
                    actual: m.values().len(),
                },
            });
        }
    }

    let id_of = |i: usize| ds.ids.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
    if storage_ok {
        for (stream, m) in [("tsdae", &ds.tsdae), ("use", &ds.use_)] {
            for i in 0..m.count() {
                if m.row(i).iter().any(|v| !v.is_finite()) {
                    out.push(Violation {
                        id: Some(id_of(i)),
                        rule: Rule::NonFinite { stream },
                    });
                }
            }
        }
    }
    let max = ds.label_map.oos_index();
    for (i, &label) in ds.labels.iter().enumerate() {
        if label > max {
            out.push(Violation {
                id: Some(id_of(i)),
                rule: Rule::LabelOutOfRange { label, max },
            });
        }
    }
    out
}
