//! Known-intent selection and train/validation/test assembly.
//!
//! A fraction of a corpus's intents is drawn as "known". Training and
//! validation only see known intents plus constructed outliers; at test time
//! every row of an unselected intent is relabelled out-of-scope, together
//! with any real OOS rows.

use std::collections::HashSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::outlier::{generate_synthetic, merge_outliers, OutlierBatch, SynthConfig};
use crate::seed::{derive_seed, rng_from, STREAM_OPEN_DOMAIN, STREAM_SELECT, STREAM_SYNTH_VAL};
use crate::types::{DualDataset, IntentLabelMap, Split};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValOosSource {
    Synthetic,
    OpenDomain,
    UnselectedIntents,
    #[default]
    Mixed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlierCounts {
    pub synthetic: usize,
    pub open_domain: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub dataset: String,
    pub ratio: f64,
    pub seed: u64,
    pub total_intents: usize,
    /// Original intent indices, ascending.
    pub known_intents: Vec<usize>,
    pub unknown_intents: Vec<usize>,
    /// Outliers merged into the training set.
    pub outlier_counts: OutlierCounts,
    /// Outliers added to validation. `None` scales the training counts by
    /// the ratio of known validation rows to known training rows.
    pub val_outlier_counts: Option<OutlierCounts>,
    pub val_oos_source: ValOosSource,
    /// Also route training rows of unselected intents into validation OOS.
    pub unknown_train_to_val: bool,
}

/// `round_half_up(total * ratio)`.
pub fn known_count(total: usize, ratio: f64) -> usize {
    (total as f64 * ratio + 0.5 + 1e-9).floor() as usize
}

/// Seeded uniform choice of `known_count(total, ratio)` intents.
pub fn select_known(total: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if total < 2 {
        return invalid(format!("need at least 2 intents, got {total}"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return invalid(format!("ratio {ratio} outside (0, 1]"));
    }
    let k = known_count(total, ratio);
    if k == 0 || (k == total && ratio < 1.0) {
        return Err(Error::DegenerateSplit {
            known: k,
            total,
            ratio,
        });
    }
    let mut known = index::sample(&mut rng_from(derive_seed(seed, STREAM_SELECT)), total, k).into_vec();
    known.sort_unstable();
    Ok(split_known(total, known))
}

fn split_known(total: usize, known: Vec<usize>) -> (Vec<usize>, Vec<usize>) {
    let set: HashSet<usize> = known.iter().copied().collect();
    let unknown = (0..total).filter(|i| !set.contains(i)).collect();
    (known, unknown)
}

impl ExperimentPlan {
    pub fn new(dataset: impl Into<String>, total_intents: usize, ratio: f64, seed: u64) -> Result<Self> {
        let (known_intents, unknown_intents) = select_known(total_intents, ratio, seed)?;
        Ok(Self {
            dataset: dataset.into(),
            ratio,
            seed,
            total_intents,
            known_intents,
            unknown_intents,
            outlier_counts: OutlierCounts {
                synthetic: 500,
                open_domain: 500,
            },
            val_outlier_counts: None,
            val_oos_source: ValOosSource::default(),
            unknown_train_to_val: false,
        })
    }

    /// Plan with an externally fixed known-intent list (e.g. to mirror
    /// another toolkit's seeds).
    pub fn with_known(
        dataset: impl Into<String>,
        total_intents: usize,
        mut known: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        known.sort_unstable();
        known.dedup();
        if known.is_empty() || known.last().is_some_and(|&k| k >= total_intents) {
            return invalid("fixed known-intent list is empty or out of range");
        }
        let ratio = known.len() as f64 / total_intents as f64;
        let (known_intents, unknown_intents) = split_known(total_intents, known);
        Ok(Self {
            dataset: dataset.into(),
            ratio,
            seed,
            total_intents,
            known_intents,
            unknown_intents,
            outlier_counts: OutlierCounts {
                synthetic: 500,
                open_domain: 500,
            },
            val_outlier_counts: None,
            val_oos_source: ValOosSource::default(),
            unknown_train_to_val: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut all: Vec<usize> = self
            .known_intents
            .iter()
            .chain(&self.unknown_intents)
            .copied()
            .collect();
        all.sort_unstable();
        if all != (0..self.total_intents).collect::<Vec<_>>() {
            return Err(Error::Config(
                "known and unknown intents must partition all intents".into(),
            ));
        }
        if self.known_intents.is_empty() {
            return Err(Error::Config("no known intents".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }
}

/// How an original label maps into the experiment's label space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRemap {
    pub original_index: usize,
    pub name: String,
    pub new_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitBundle {
    pub train: DualDataset,
    pub val: DualDataset,
    pub test: DualDataset,
    pub remap: Vec<LabelRemap>,
}

impl SplitBundle {
    pub fn remap_tsv(&self) -> String {
        let mut s = String::from("original_index\tname\tnew_index\n");
        for r in &self.remap {
            s.push_str(&format!("{}\t{}\t{}\n", r.original_index, r.name, r.new_index));
        }
        s
    }
}

fn scaled(count: usize, num: usize, den: usize) -> usize {
    if den == 0 {
        return 0;
    }
    (count * num + den / 2) / den
}

/// Builds the three experiment splits.
///
/// * train: known-intent train rows, then `outlier_counts` synthetic rows
///   (mixed from those train rows) and open-domain rows, all OOS-labelled;
/// * val: known-intent val rows plus OOS rows from `val_oos_source`;
/// * test: known-intent test rows, unselected-intent test rows, any row of
///   `full` already labelled OOS, and every `external_oos` row.
///
/// Known labels are renumbered `0..K` in ascending original order; OOS is `K`.
/// `open_domain` is the pool that open-domain outliers are drawn from; train
/// and validation receive disjoint rows.
pub fn build_splits(
    full: &DualDataset,
    external_oos: Option<&DualDataset>,
    open_domain: Option<&OutlierBatch>,
    plan: &ExperimentPlan,
    synth: &SynthConfig,
) -> Result<SplitBundle> {
    plan.validate()?;
    let Some(tags) = &full.splits else {
        return invalid("dataset records carry no split tags");
    };
    let n_orig = full.label_map.known_count();
    if n_orig != plan.total_intents {
        return invalid(format!(
            "plan covers {} intents, dataset has {n_orig}",
            plan.total_intents
        ));
    }
    let orig_oos = full.label_map.oos_index();
    let k = plan.known_intents.len();
    let mut remap_idx = vec![k; n_orig + 1];
    let mut names = Vec::with_capacity(k);
    let mut remap = Vec::with_capacity(n_orig);
    for (new, &orig) in plan.known_intents.iter().enumerate() {
        remap_idx[orig] = new;
        names.push(full.label_map.names()[orig].clone());
    }
    for (orig, name) in full.label_map.names().iter().enumerate() {
        remap.push(LabelRemap {
            original_index: orig,
            name: name.clone(),
            new_index: remap_idx[orig],
        });
    }
    let label_map = IntentLabelMap::new(names)?;
    let known: HashSet<usize> = plan.known_intents.iter().copied().collect();

    let rows_where = |pred: &dyn Fn(usize, Split) -> bool| -> Vec<usize> {
        (0..full.len()).filter(|&i| pred(full.labels[i], tags[i])).collect()
    };
    let subset = |rows: &[usize]| -> DualDataset {
        let mut ds = full.select(rows);
        ds.labels.iter_mut().for_each(|l| *l = remap_idx[*l]);
        ds.splits = None;
        ds.label_map = label_map.clone();
        ds
    };
    let is_known = |l: usize| l != orig_oos && known.contains(&l);
    let is_unknown = |l: usize| l != orig_oos && !known.contains(&l);

    let train_known = subset(&rows_where(&|l, s| s == Split::Train && is_known(l)));
    let val_known = subset(&rows_where(&|l, s| s == Split::Val && is_known(l)));

    let val_counts = plan.val_outlier_counts.unwrap_or(OutlierCounts {
        synthetic: scaled(plan.outlier_counts.synthetic, val_known.len(), train_known.len()),
        open_domain: scaled(plan.outlier_counts.open_domain, val_known.len(), train_known.len()),
    });
    let val_uses_synth = matches!(plan.val_oos_source, ValOosSource::Synthetic | ValOosSource::Mixed);
    let val_uses_open = matches!(plan.val_oos_source, ValOosSource::OpenDomain | ValOosSource::Mixed);
    let val_open = if val_uses_open { val_counts.open_domain } else { 0 };

    // open-domain rows: one seeded draw, first part to train, rest to val
    let (open_train, open_val) = match open_domain {
        _ if plan.outlier_counts.open_domain + val_open == 0 => (None, None),
        None => return invalid("open-domain outliers requested but no pool supplied"),
        Some(pool) => {
            let need = plan.outlier_counts.open_domain + val_open;
            if need > pool.len() {
                return invalid(format!(
                    "need {need} open-domain rows, pool has {}",
                    pool.len()
                ));
            }
            let mut rng = rng_from(derive_seed(plan.seed, STREAM_OPEN_DOMAIN));
            let drawn = index::sample(&mut rng, pool.len(), need).into_vec();
            let (a, b) = drawn.split_at(plan.outlier_counts.open_domain);
            let (mut a, mut b) = (a.to_vec(), b.to_vec());
            a.sort_unstable();
            b.sort_unstable();
            (Some(pool.select(&a)), Some(pool.select(&b)))
        }
    };

    let mut train_batches = Vec::new();
    if plan.outlier_counts.synthetic > 0 {
        let sc = SynthConfig {
            count: plan.outlier_counts.synthetic,
            ..synth.clone()
        };
        train_batches.push(generate_synthetic(&train_known, &sc)?);
    }
    train_batches.extend(open_train);
    let train = merge_outliers(&train_known, &train_batches)?;

    let mut val_batches = Vec::new();
    if val_uses_synth && val_counts.synthetic > 0 {
        let sc = SynthConfig {
            count: val_counts.synthetic,
            seed: derive_seed(synth.seed, STREAM_SYNTH_VAL),
            ..synth.clone()
        };
        val_batches.push(generate_synthetic(&val_known, &sc)?);
    }
    val_batches.extend(open_val);
    let mut val = merge_outliers(&val_known, &val_batches)?;
    let mut extra_val = Vec::new();
    if plan.val_oos_source == ValOosSource::UnselectedIntents {
        extra_val.extend(rows_where(&|l, s| s == Split::Val && is_unknown(l)));
    }
    if plan.unknown_train_to_val {
        extra_val.extend(rows_where(&|l, s| s == Split::Train && is_unknown(l)));
    }
    extra_val.sort_unstable();
    val.append(&subset(&extra_val))?;

    let mut test = subset(&rows_where(&|l, s| {
        s == Split::Test && l != orig_oos && (is_known(l) || is_unknown(l))
    }));
    test.append(&subset(&rows_where(&|l, _| l == orig_oos)))?;
    if let Some(ext) = external_oos {
        if ext.d_tsdae() != full.d_tsdae() || ext.d_use() != full.d_use() {
            return invalid("external OOS dims do not match the corpus");
        }
        let mut ext = ext.clone();
        ext.labels = vec![k; ext.len()];
        ext.splits = None;
        ext.label_map = label_map.clone();
        test.append(&ext)?;
    }

    let seen: HashSet<&str> = train.ids.iter().chain(&val.ids).map(String::as_str).collect();
    if let Some(dup) = test.ids.iter().find(|id| seen.contains(id.as_str())) {
        return invalid(format!("test id {dup:?} also appears in train or val"));
    }
    Ok(SplitBundle {
        train,
        val,
        test,
        remap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::EmbeddingMatrix;

    /// `n_intents` intents with the given rows per split; dims 2/1.
    pub(crate) fn corpus(n_intents: usize, per: (usize, usize, usize)) -> DualDataset {
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        let mut ids = Vec::new();
        for i in 0..n_intents {
            for (s, c) in [(Split::Train, per.0), (Split::Val, per.1), (Split::Test, per.2)] {
                for j in 0..c {
                    labels.push(i);
                    splits.push(s);
                    ids.push(format!("{i}-{}-{j}", s.as_str()));
                }
            }
        }
        let n = labels.len();
        let t = (0..n * 2).map(|v| ((v * 37) % 101) as f32 / 101.0).collect();
        let u = (0..n).map(|v| ((v * 13) % 17) as f32).collect();
        DualDataset {
            tsdae: EmbeddingMatrix::new(2, t).unwrap(),
            use_: EmbeddingMatrix::new(1, u).unwrap(),
            labels,
            ids,
            splits: Some(splits),
            label_map: IntentLabelMap::new((0..n_intents).map(|i| format!("i{i}")).collect())
                .unwrap(),
        }
    }

    #[test]
    fn clinc_quarter_counts() {
        let (k, u) = select_known(150, 0.25, 0).unwrap();
        assert_eq!((k.len(), u.len()), (38, 112));
        assert_eq!(known_count(150, 0.5), 75);
        assert_eq!(known_count(150, 0.75), 113);
        assert_eq!(select_known(20, 0.5, 3).unwrap().0.len(), 10);
    }

    #[test]
    fn selection_deterministic_and_disjoint() {
        let a = select_known(77, 0.5, 42).unwrap();
        assert_eq!(a, select_known(77, 0.5, 42).unwrap());
        assert_ne!(a, select_known(77, 0.5, 43).unwrap());
        let all: HashSet<usize> = a.0.iter().chain(&a.1).copied().collect();
        assert_eq!(all.len(), 77);
    }

    #[test]
    fn degenerate_ratios() {
        assert!(matches!(select_known(10, 0.01, 0), Err(Error::DegenerateSplit { .. })));
        assert!(matches!(select_known(10, 0.99, 0), Err(Error::DegenerateSplit { .. })));
        assert_eq!(select_known(10, 1.0, 0).unwrap().0.len(), 10);
        assert!(select_known(10, 0.0, 0).is_err());
        assert!(select_known(1, 0.5, 0).is_err());
    }

    #[test]
    fn plan_toml_round_trip() {
        let mut plan = ExperimentPlan::new("toy", 20, 0.25, 7).unwrap();
        plan.val_outlier_counts = Some(OutlierCounts {
            synthetic: 3,
            open_domain: 4,
        });
        assert_eq!(ExperimentPlan::from_toml(&plan.to_toml()).unwrap(), plan);
        let fixed = ExperimentPlan::with_known("toy", 10, vec![7, 1, 3], 0).unwrap();
        assert_eq!(fixed.known_intents, vec![1, 3, 7]);
        assert_eq!(fixed.unknown_intents.len(), 7);
        assert!(ExperimentPlan::from_toml("ratio = 0.5\nbogus = 1\n").is_err());
    }

    /// Counting oracle over the 10 x (20/5/5) layout at 50%.
    #[test]
    fn toy_layout_at_half() {
        let full = corpus(10, (20, 5, 5));
        let mut plan = ExperimentPlan::new("toy", 10, 0.5, 1).unwrap();
        plan.outlier_counts = OutlierCounts {
            synthetic: 50,
            open_domain: 0,
        };
        let b = build_splits(&full, None, None, &plan, &SynthConfig::default()).unwrap();
        let oos = 5;
        let count = |ds: &DualDataset, oos_rows: bool| {
            ds.labels.iter().filter(|&&l| (l == oos) == oos_rows).count()
        };
        assert_eq!(count(&b.train, false), 100);
        assert_eq!(count(&b.train, true), 50);
        assert_eq!(count(&b.test, false), 25);
        assert_eq!(count(&b.test, true), 25);
        assert_eq!(count(&b.val, false), 25);
        // proportional default: 50 * 25 / 100
        assert_eq!(count(&b.val, true), 13);
        assert_eq!(b.train.label_map.known_count(), 5);
    }

    #[test]
    fn remap_and_disjointness() {
        let full = corpus(8, (6, 2, 3));
        let mut plan = ExperimentPlan::new("c", 8, 0.5, 9).unwrap();
        plan.outlier_counts.open_domain = 0;
        plan.outlier_counts.synthetic = 10;
        plan.val_oos_source = ValOosSource::UnselectedIntents;
        let b = build_splits(&full, None, None, &plan, &SynthConfig::default()).unwrap();
        let k = plan.known_intents.len();
        // bijection on known, everything else to K
        let mut seen = HashSet::new();
        for r in &b.remap {
            if plan.known_intents.contains(&r.original_index) {
                assert!(r.new_index < k);
                assert!(seen.insert(r.new_index));
            } else {
                assert_eq!(r.new_index, k);
            }
        }
        assert_eq!(seen.len(), k);
        let train_ids: HashSet<_> = b.train.ids.iter().collect();
        let val_ids: HashSet<_> = b.val.ids.iter().collect();
        assert!(b.test.ids.iter().all(|i| !train_ids.contains(i) && !val_ids.contains(i)));
        assert!(train_ids.is_disjoint(&val_ids));
        // no unknown-intent rows in train
        let unknown_prefixes: Vec<String> =
            plan.unknown_intents.iter().map(|u| format!("{u}-")).collect();
        assert!(b
            .train
            .ids
            .iter()
            .all(|id| !unknown_prefixes.iter().any(|p| id.starts_with(p))));
        // unknown test rows labelled K
        for (id, &l) in b.test.ids.iter().zip(&b.test.labels) {
            if unknown_prefixes.iter().any(|p| id.starts_with(p)) {
                assert_eq!(l, k);
            }
        }
        // unselected val rows as validation OOS: 4 intents x 2
        assert_eq!(b.val.labels.iter().filter(|&&l| l == k).count(), 8);
    }

    #[test]
    fn full_ratio_no_outliers_is_closed_set() {
        let full = corpus(4, (5, 2, 2));
        let mut plan = ExperimentPlan::new("c", 4, 1.0, 0).unwrap();
        plan.outlier_counts = OutlierCounts::default();
        let b = build_splits(&full, None, None, &plan, &SynthConfig::default()).unwrap();
        assert!(b.test.labels.iter().all(|&l| l < 4));
        assert!(b.train.labels.iter().all(|&l| l < 4));
        assert_eq!(b.test.len(), 8);
    }

    #[test]
    fn open_domain_rows_are_disjoint_between_train_and_val() {
        let full = corpus(6, (10, 4, 4));
        let pool = OutlierBatch::open_domain(
            EmbeddingMatrix::new(2, vec![0.5; 400]).unwrap(),
            EmbeddingMatrix::new(1, vec![0.5; 200]).unwrap(),
        )
        .unwrap();
        let mut plan = ExperimentPlan::new("c", 6, 0.5, 2).unwrap();
        plan.outlier_counts = OutlierCounts {
            synthetic: 0,
            open_domain: 30,
        };
        plan.val_oos_source = ValOosSource::OpenDomain;
        let b = build_splits(&full, None, Some(&pool), &plan, &SynthConfig::default()).unwrap();
        let tr: HashSet<_> = b.train.ids.iter().filter(|i| i.starts_with("open:")).collect();
        let va: HashSet<_> = b.val.ids.iter().filter(|i| i.starts_with("open:")).collect();
        assert_eq!(tr.len(), 30);
        assert_eq!(va.len(), 12); // 30 * 12 / 30
        assert!(tr.is_disjoint(&va));
        assert!(build_splits(&full, None, None, &plan, &SynthConfig::default()).is_err());
    }

    #[test]
    fn missing_tags_rejected() {
        let mut full = corpus(4, (3, 1, 1));
        full.splits = None;
        let plan = ExperimentPlan::new("c", 4, 0.5, 0).unwrap();
        assert!(build_splits(&full, None, None, &plan, &SynthConfig::default()).is_err());
    }

    #[test]
    fn rebuild_is_deterministic() {
        let full = corpus(10, (20, 5, 5));
        let mut plan = ExperimentPlan::new("toy", 10, 0.5, 1).unwrap();
        plan.outlier_counts.open_domain = 0;
        let a = build_splits(&full, None, None, &plan, &SynthConfig::default()).unwrap();
        let b = build_splits(&full, None, None, &plan, &SynthConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
