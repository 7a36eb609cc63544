//! End-to-end experiment sweeps driven by a TOML config.
//!
//! ```toml
//! [data]
//! name = "toy"
//! manifest = "toy/manifest.tsv"
//!
//! [experiment]
//! ratios = [0.25, 0.5, 0.75]
//! seeds = [0, 1, 2, 3, 4]
//! synthetic = 500
//!
//! [train]
//! max_epochs = 200
//! patience = 20
//! ```
//!
//! Every (ratio, seed) pair is one run. Each run writes its artefacts under
//! `<out>/<dataset>/ratio-<r>/seed-<s>/`; the sweep writes `reports.jsonl`,
//! `summary.json`, `summary.md` and `run.log` at the top of `<out>`.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::embedding::read_embeddings;
use crate::io::manifest::load_dataset;
use crate::metrics::{render_table, summarize_runs, EvalReport, RunMeta};
use crate::nn::{train_with, write_checkpoint, Activation, Model, ModelConfig, TrainConfig, TrainHistory};
use crate::outlier::{generate_synthetic, merge_outliers, OutlierBatch, SynthConfig};
use crate::seed::{derive_seed, STREAM_SYNTH_TRAIN};
use crate::split::{build_splits, ExperimentPlan, OutlierCounts, SplitBundle, ValOosSource};
use crate::threshold::{calibrate, predict, Threshold, ThresholdPolicy};
use crate::types::DualDataset;

pub const VARIANT_MAIN: &str = "deter";
pub const VARIANT_MODEL_ONLY: &str = "model_only";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub name: String,
    pub manifest: PathBuf,
    /// Manifest of real OOS rows, all added to test.
    #[serde(default)]
    pub external_oos: Option<PathBuf>,
    #[serde(default)]
    pub open_domain_tsdae: Option<PathBuf>,
    #[serde(default)]
    pub open_domain_use: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub synthetic: usize,
    /// Defaults to 500 when an open-domain pool is configured, else 0.
    pub open_domain: Option<usize>,
    pub val_synthetic: Option<usize>,
    pub val_open_domain: Option<usize>,
    pub val_oos_source: ValOosSource,
    pub unknown_train_to_val: bool,
    pub theta_min: f64,
    pub theta_max: f64,
    /// Draw fresh synthetic outliers before every epoch after the first.
    pub resample_each_epoch: bool,
    /// Also report the unthresholded (T = 0) predictions.
    pub ablation: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            ratios: vec![0.25, 0.5, 0.75],
            seeds: (0..5).collect(),
            synthetic: 500,
            open_domain: None,
            val_synthetic: None,
            val_open_domain: None,
            val_oos_source: ValOosSource::default(),
            unknown_train_to_val: false,
            theta_min: 0.0,
            theta_max: 1.0,
            resample_each_epoch: false,
            ablation: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub tsdae_hidden: Vec<usize>,
    pub use_hidden: Vec<usize>,
    pub dropout_rate: f64,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::new(1, 1, 2);
        Self {
            tsdae_hidden: d.tsdae_hidden,
            use_hidden: d.use_hidden,
            dropout_rate: d.dropout_rate,
            activation: d.activation,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, d_tsdae: usize, d_use: usize, n_classes: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            tsdae_hidden: self.tsdae_hidden.clone(),
            use_hidden: self.use_hidden.clone(),
            dropout_rate: self.dropout_rate,
            activation: self.activation,
            seed,
            ..ModelConfig::new(d_tsdae, d_use, n_classes)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub threshold: ThresholdPolicy,
}

impl PipelineConfig {
    /// Parses `text`; relative data paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let d = &mut cfg.data;
        d.manifest = base.join(&d.manifest);
        for p in [&mut d.external_oos, &mut d.open_domain_tsdae, &mut d.open_domain_use]
            .into_iter()
            .flatten()
        {
            *p = base.join(&*p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.ratios.is_empty() || e.seeds.is_empty() {
            return Err(Error::Config("need at least one ratio and one seed".into()));
        }
        if self.data.open_domain_tsdae.is_some() != self.data.open_domain_use.is_some() {
            return Err(Error::Config(
                "open_domain_tsdae and open_domain_use must be given together".into(),
            ));
        }
        self.synth_config(0).validate()?;
        self.train.validate()?;
        self.threshold.grid()?;
        Ok(())
    }

    fn synth_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            count: self.experiment.synthetic,
            theta_min: self.experiment.theta_min,
            theta_max: self.experiment.theta_max,
            seed,
        }
    }

    fn open_domain_count(&self) -> usize {
        let has_pool = self.data.open_domain_tsdae.is_some();
        self.experiment
            .open_domain
            .unwrap_or(if has_pool { 500 } else { 0 })
    }

    /// Every (ratio, seed) pair, ratio-major.
    pub fn jobs(&self) -> Vec<(f64, u64)> {
        let e = &self.experiment;
        e.ratios
            .iter()
            .flat_map(|&r| e.seeds.iter().map(move |&s| (r, s)))
            .collect()
    }
}

/// Inputs shared by all runs of a sweep.
#[derive(Clone, Debug)]
pub struct SweepData {
    pub full: DualDataset,
    pub external_oos: Option<DualDataset>,
    pub open_domain: Option<OutlierBatch>,
}

impl SweepData {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let full = load_dataset(&cfg.data.manifest)?;
        let external_oos = cfg.data.external_oos.as_ref().map(load_dataset).transpose()?;
        let open_domain = match (&cfg.data.open_domain_tsdae, &cfg.data.open_domain_use) {
            (Some(t), Some(u)) => Some(OutlierBatch::open_domain(read_embeddings(t)?, read_embeddings(u)?)?),
            _ => None,
        };
        Ok(Self {
            full,
            external_oos,
            open_domain,
        })
    }
}

/// Everything one run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub ratio: f64,
    pub seed: u64,
    pub plan: ExperimentPlan,
    pub model: Model<f32>,
    pub history: TrainHistory,
    pub threshold: Threshold,
    pub curve_tsv: String,
    pub reports: Vec<EvalReport>,
    pub bundle: SplitBundle,
}

pub fn run_dir(out: &Path, dataset: &str, ratio: f64, seed: u64) -> PathBuf {
    out.join(dataset)
        .join(format!("ratio-{ratio:.2}"))
        .join(format!("seed-{seed}"))
}

pub fn make_plan(cfg: &PipelineConfig, total_intents: usize, ratio: f64, seed: u64) -> Result<ExperimentPlan> {
    let e = &cfg.experiment;
    let mut plan = ExperimentPlan::new(&cfg.data.name, total_intents, ratio, seed)?;
    plan.outlier_counts = OutlierCounts {
        synthetic: e.synthetic,
        open_domain: cfg.open_domain_count(),
    };
    plan.val_outlier_counts = match (e.val_synthetic, e.val_open_domain) {
        (None, None) => None,
        (s, o) => Some(OutlierCounts {
            synthetic: s.unwrap_or(0),
            open_domain: o.unwrap_or(0),
        }),
    };
    plan.val_oos_source = e.val_oos_source;
    plan.unknown_train_to_val = e.unknown_train_to_val;
    Ok(plan)
}

/// One (ratio, seed) run, without touching the filesystem.
pub fn run_one(cfg: &PipelineConfig, data: &SweepData, ratio: f64, seed: u64) -> Result<RunOutcome> {
    let plan = make_plan(cfg, data.full.label_map.known_count(), ratio, seed)?;
    let synth_seed = derive_seed(seed, STREAM_SYNTH_TRAIN);
    let synth = cfg.synth_config(synth_seed);
    let bundle = build_splits(
        &data.full,
        data.external_oos.as_ref(),
        data.open_domain.as_ref(),
        &plan,
        &synth,
    )?;
    let k = plan.known_intents.len();
    let mc = cfg
        .model
        .model_config(data.full.d_tsdae(), data.full.d_use(), k + 1, seed);
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };

    let resample = cfg.experiment.resample_each_epoch && cfg.experiment.synthetic > 0;
    // everything in the training set except the synthetic rows
    let base_rows: Vec<usize> = (0..bundle.train.len())
        .filter(|&i| !bundle.train.ids[i].starts_with("syn:"))
        .collect();
    let base = bundle.train.select(&base_rows);
    let refresh = |epoch: usize| -> Result<Option<DualDataset>> {
        if !resample || epoch == 1 {
            return Ok(None);
        }
        let known_rows: Vec<usize> = (0..base.len()).filter(|&i| base.labels[i] < k).collect();
        let fresh = generate_synthetic(
            &base.select(&known_rows),
            &cfg.synth_config(derive_seed(synth_seed, epoch as u64)),
        )?;
        Ok(Some(merge_outliers(&base, &[fresh])?))
    };
    let (model, history) = train_with(Model::<f32>::init(mc)?, &bundle.train, &bundle.val, &tc, refresh)?;

    let calibrated = calibrate(&model, &bundle.val, &cfg.threshold)?;
    let meta = |variant: &str| RunMeta {
        dataset: cfg.data.name.clone(),
        ratio,
        seed,
        variant: variant.to_string(),
    };
    let gold = &bundle.test.labels;
    let pred = predict(&model, &bundle.test, calibrated.threshold)?;
    let mut reports = vec![EvalReport::evaluate(
        gold,
        &pred,
        k + 1,
        calibrated.threshold.value(),
        meta(VARIANT_MAIN),
    )?];
    if cfg.experiment.ablation {
        let pred0 = predict(&model, &bundle.test, Threshold::ZERO)?;
        reports.push(EvalReport::evaluate(gold, &pred0, k + 1, 0.0, meta(VARIANT_MODEL_ONLY))?);
    }
    Ok(RunOutcome {
        ratio,
        seed,
        plan,
        model,
        history,
        threshold: calibrated.threshold,
        curve_tsv: calibrated.curve_tsv(),
        reports,
        bundle,
    })
}

fn write_run(dir: &Path, run: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("plan.toml"), run.plan.to_toml())?;
    fs::write(dir.join("labels.tsv"), run.bundle.remap_tsv())?;
    write_checkpoint(&run.model, dir.join("model.detm"))?;
    fs::write(dir.join("history.tsv"), run.history.to_tsv())?;
    fs::write(dir.join("threshold_curve.tsv"), &run.curve_tsv)?;
    for r in &run.reports {
        let name = if r.variant == VARIANT_MAIN {
            "report.json".to_string()
        } else {
            format!("report_{}.json", r.variant)
        };
        fs::write(dir.join(name), r.to_json() + "\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub reports: Vec<EvalReport>,
    /// (ratio, seed, error message) for runs that failed.
    pub failures: Vec<(f64, u64, String)>,
}

/// Runs the whole sweep on `threads` worker threads (0 = rayon default).
/// Output files do not depend on the thread count.
pub fn run_sweep(cfg: &PipelineConfig, out: &Path, threads: usize) -> Result<SweepResult> {
    let data = SweepData::load(cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let jobs = cfg.jobs();
    let results: Vec<Result<RunOutcome>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(ratio, seed)| {
                info!("run ratio={ratio} seed={seed} start");
                let run = run_one(cfg, &data, ratio, seed)?;
                write_run(&run_dir(out, &cfg.data.name, ratio, seed), &run)?;
                info!(
                    "run ratio={ratio} seed={seed} done: T={:.2} known={:.4} unknown={:.4}",
                    run.threshold.value(),
                    run.reports[0].macro_f1_known,
                    run.reports[0].f1_unknown
                );
                Ok(run)
            })
            .collect()
    });

    let mut log = String::new();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (&(ratio, seed), res) in jobs.iter().zip(results) {
        match res {
            Ok(run) => {
                let r = &run.reports[0];
                log.push_str(&format!(
                    "ratio={ratio:.2} seed={seed} ok best_epoch={} stopped_epoch={} threshold={:.2} macro_f1_known={:.6} f1_unknown={:.6}\n",
                    run.history.best_epoch,
                    run.history.stopped_epoch,
                    run.threshold.value(),
                    r.macro_f1_known,
                    r.f1_unknown
                ));
                reports.extend(run.reports);
            }
            Err(e) => {
                warn!("run ratio={ratio} seed={seed} failed: {e}");
                log.push_str(&format!("ratio={ratio:.2} seed={seed} error: {e}\n"));
                failures.push((ratio, seed, e.to_string()));
            }
        }
    }
    fs::write(out.join("run.log"), log)?;
    write_summaries(out, &reports)?;
    Ok(SweepResult { reports, failures })
}

/// Writes `reports.jsonl`, `summary.json` and `summary.md`. With no
/// reports only the empty `reports.jsonl` is written.
pub fn write_summaries(out: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut jsonl = String::new();
    for r in reports {
        jsonl.push_str(&serde_json::to_string(r).expect("report serializes"));
        jsonl.push('\n');
    }
    fs::write(out.join("reports.jsonl"), jsonl)?;
    if reports.is_empty() {
        return Ok(());
    }
    let summaries = summarize_runs(reports)?;
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summaries).expect("summary serializes") + "\n",
    )?;
    fs::write(out.join("summary.md"), render_table(&summaries))?;
    Ok(())
}

/// Reads a `reports.jsonl` file.
pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::InvalidInput(format!("report line {}: {e}", i + 1)))
        })
        .collect()
}
