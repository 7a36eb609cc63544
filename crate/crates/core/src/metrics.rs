//! Confusion matrices, per-class F1 and multi-seed aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Square count matrix, rows = gold, columns = predicted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<u64>>", try_from = "Vec<Vec<u64>>")]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold * self.n + pred]
    }

    pub fn add(&mut self, gold: usize, pred: usize) {
        self.counts[gold * self.n + pred] += 1;
    }

    pub fn row_sum(&self, gold: usize) -> u64 {
        self.counts[gold * self.n..(gold + 1) * self.n].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.n).map(|g| self.get(g, pred)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }
}

impl From<ConfusionMatrix> for Vec<Vec<u64>> {
    fn from(cm: ConfusionMatrix) -> Self {
        cm.counts.chunks(cm.n.max(1)).map(<[u64]>::to_vec).collect()
    }
}

impl TryFrom<Vec<Vec<u64>>> for ConfusionMatrix {
    type Error = String;

    fn try_from(rows: Vec<Vec<u64>>) -> std::result::Result<Self, String> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err("confusion matrix must be square".into());
        }
        Ok(Self {
            n,
            counts: rows.into_iter().flatten().collect(),
        })
    }
}

pub fn confusion_matrix(gold: &[usize], pred: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if gold.len() != pred.len() {
        return invalid(format!("{} gold labels vs {} predictions", gold.len(), pred.len()));
    }
    if let Some(&bad) = gold.iter().chain(pred).find(|&&l| l >= n_classes) {
        return invalid(format!("label {bad} out of range for {n_classes} classes"));
    }
    let mut cm = ConfusionMatrix::zeros(n_classes);
    for (&g, &p) in gold.iter().zip(pred) {
        cm.add(g, p);
    }
    Ok(cm)
}

/// One-vs-rest F1 per class; a class with no gold and no predicted rows scores 0.
pub fn f1_scores(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.n_classes())
        .map(|c| {
            let tp = cm.get(c, c);
            let denom = cm.row_sum(c) + cm.col_sum(c);
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub ratio: f64,
    pub seed: u64,
    pub variant: String,
    pub n_classes: usize,
    pub threshold_used: f64,
    pub macro_f1_known: f64,
    pub f1_unknown: f64,
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

/// Identifies a run within a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMeta {
    pub dataset: String,
    pub ratio: f64,
    pub seed: u64,
    pub variant: String,
}

impl EvalReport {
    /// `n_classes` counts OOS, which must be the last index.
    pub fn evaluate(
        gold: &[usize],
        pred: &[usize],
        n_classes: usize,
        threshold_used: f64,
        meta: RunMeta,
    ) -> Result<Self> {
        if n_classes < 2 {
            return invalid("need at least one known class plus OOS");
        }
        let cm = confusion_matrix(gold, pred, n_classes)?;
        let f1 = f1_scores(&cm);
        let k = n_classes - 1;
        let total = cm.total();
        Ok(Self {
            dataset: meta.dataset,
            ratio: meta.ratio,
            seed: meta.seed,
            variant: meta.variant,
            n_classes,
            threshold_used,
            macro_f1_known: mean(&f1[..k]),
            f1_unknown: f1[k],
            accuracy: if total == 0 {
                0.0
            } else {
                cm.trace() as f64 / total as f64
            },
            per_class_f1: f1,
            confusion: cm,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let m = mean(xs);
        let var = mean(&xs.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>());
        Self {
            mean: m,
            std: var.sqrt(),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset: String,
    pub variant: String,
    pub ratio: f64,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub macro_f1_known: Stat,
    pub f1_unknown: Stat,
    pub accuracy: Stat,
    pub threshold: Stat,
}

/// Groups reports by (dataset, variant, ratio), ordered by those keys.
pub fn summarize_runs(reports: &[EvalReport]) -> Result<Vec<RunSummary>> {
    if reports.is_empty() {
        return invalid("no reports to summarize");
    }
    let mut groups: BTreeMap<(&str, &str, u64), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        if !(r.ratio >= 0.0) {
            return invalid(format!("bad ratio {} in report", r.ratio));
        }
        // non-negative floats order like their bit patterns
        groups
            .entry((&r.dataset, &r.variant, r.ratio.to_bits()))
            .or_default()
            .push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((dataset, variant, ratio), runs) in groups {
        let n = runs[0].n_classes;
        if runs.iter().any(|r| r.n_classes != n) {
            return invalid(format!(
                "mixed class counts in group {dataset}/{variant}/{}",
                f64::from_bits(ratio)
            ));
        }
        let col = |f: fn(&EvalReport) -> f64| runs.iter().map(|r| f(r)).collect::<Vec<_>>();
        let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        out.push(RunSummary {
            dataset: dataset.to_string(),
            variant: variant.to_string(),
            ratio: f64::from_bits(ratio),
            runs: runs.len(),
            seeds,
            macro_f1_known: Stat::of(&col(|r| r.macro_f1_known)),
            f1_unknown: Stat::of(&col(|r| r.f1_unknown)),
            accuracy: Stat::of(&col(|r| r.accuracy)),
            threshold: Stat::of(&col(|r| r.threshold_used)),
        });
    }
    Ok(out)
}

fn pct(s: &Stat) -> String {
    format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std)
}

/// Markdown table: one row per (dataset, variant), a Known/Unknown column
/// pair per ratio, then mean thresholds and seed counts.
pub fn render_table(summaries: &[RunSummary]) -> String {
    let mut ratios: Vec<u64> = summaries.iter().map(|s| s.ratio.to_bits()).collect();
    ratios.sort_unstable();
    ratios.dedup();
    let mut rows: BTreeMap<(&str, &str), BTreeMap<u64, &RunSummary>> = BTreeMap::new();
    for s in summaries {
        rows.entry((&s.dataset, &s.variant))
            .or_default()
            .insert(s.ratio.to_bits(), s);
    }

    let mut out = String::from("| Dataset | Variant |");
    for &r in &ratios {
        let p = 100.0 * f64::from_bits(r);
        out.push_str(&format!(" {p:.0}% Known | {p:.0}% Unknown |"));
    }
    out.push_str(" T | Seeds |\n|---|---|");
    for _ in &ratios {
        out.push_str("---|---|");
    }
    out.push_str("---|---|\n");
    for ((dataset, variant), by_ratio) in rows {
        out.push_str(&format!("| {dataset} | {variant} |"));
        let mut ts = Vec::new();
        let mut seeds = Vec::new();
        for r in &ratios {
            match by_ratio.get(r) {
                Some(s) => {
                    out.push_str(&format!(" {} | {} |", pct(&s.macro_f1_known), pct(&s.f1_unknown)));
                    ts.push(format!("{:.2}", s.threshold.mean));
                    seeds.push(s.runs.to_string());
                }
                None => out.push_str(" - | - |"),
            }
        }
        out.push_str(&format!(" {} | {} |\n", ts.join("/"), seeds.join("/")));
    }
    out
}
