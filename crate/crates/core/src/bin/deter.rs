use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use deter::io::{gen_toy, load_dataset, save_dataset, write_embeddings, ToyGenConfig};
use deter::metrics::{EvalReport, RunMeta};
use deter::nn::{read_checkpoint, train, write_checkpoint, Model, TrainConfig};
use deter::outlier::{generate_synthetic, OutlierBatch, Provenance, SynthConfig};
use deter::pipeline::{
    read_reports, run_sweep, write_summaries, ModelSection, PipelineConfig, VARIANT_MAIN, VARIANT_MODEL_ONLY,
};
use deter::split::{build_splits, ExperimentPlan, OutlierCounts};
use deter::threshold::{calibrate, predict, Threshold, ThresholdPolicy};

#[derive(Parser)]
#[command(name = "deter", version, about = "Out-of-scope intent detection experiments")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the seed (for `run`, replaces the seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory or file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for `run` (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Run sweeps on a single thread. Outputs are identical either way.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    NoThreshold,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clustered toy corpus.
    GenToy,
    /// Select known intents and write train/val/test datasets.
    Split(SplitArgs),
    /// Generate synthetic outliers from a dataset.
    Synth(SynthArgs),
    /// Train a classifier on prepared train/val datasets.
    Train(TrainArgs),
    /// Calibrate the confidence threshold on a validation set.
    Calibrate(CalibrateArgs),
    /// Evaluate a model on a test set.
    Eval(EvalArgs),
    /// Aggregate `reports.jsonl` files into summary tables.
    Report(ReportArgs),
    /// Run a full sweep from a pipeline config.
    Run(RunArgs),
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    external_oos: Option<PathBuf>,
    #[arg(long, requires = "open_use")]
    open_tsdae: Option<PathBuf>,
    #[arg(long, requires = "open_tsdae")]
    open_use: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    synthetic: usize,
    #[arg(long, default_value_t = 0)]
    open_domain: usize,
    /// Reuse an existing plan instead of drawing a new one.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 500)]
    count: usize,
    #[arg(long, default_value_t = 0.0)]
    theta_min: f64,
    #[arg(long, default_value_t = 1.0)]
    theta_max: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    val: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Threshold value, or a file written by `calibrate`.
    #[arg(long, default_value = "0.7")]
    threshold: String,
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    #[arg(long, default_value = "dataset")]
    dataset: String,
    #[arg(long, default_value_t = 0.0)]
    ratio: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more `reports.jsonl` files.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
}

/// `[model]`, `[train]` and `[threshold]` sections for the step commands.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct StepConfig {
    model: ModelSection,
    train: TrainConfig,
    threshold: ThresholdPolicy,
    toy: ToyGenConfig,
}

fn step_config(path: Option<&Path>) -> Result<StepConfig> {
    match path {
        None => Ok(StepConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().context("--out is required")
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::GenToy => {
            let mut cfg = step_config(cli.config.as_deref())?.toy;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let path = gen_toy(&cfg)?.write(out_dir(&cli)?)?;
            println!("{}", path.display());
        }
        Command::Split(a) => cmd_split(&cli, a)?,
        Command::Synth(a) => {
            let ds = load_dataset(&a.manifest)?;
            let sc = SynthConfig {
                count: a.count,
                theta_min: a.theta_min,
                theta_max: a.theta_max,
                seed: cli.seed.unwrap_or(0),
            };
            write_batch(&generate_synthetic(&ds, &sc)?, out_dir(&cli)?)?;
        }
        Command::Train(a) => {
            let sc = step_config(cli.config.as_deref())?;
            let seed = cli.seed.unwrap_or(sc.train.seed);
            let tr = load_dataset(&a.train)?;
            let va = load_dataset(&a.val)?;
            let mc = sc
                .model
                .model_config(tr.d_tsdae(), tr.d_use(), tr.label_map.n_classes(), seed);
            let tc = TrainConfig { seed, ..sc.train };
            let (model, history) = train(Model::<f32>::init(mc)?, &tr, &va, &tc)?;
            let out = out_dir(&cli)?;
            fs::create_dir_all(out)?;
            write_checkpoint(&model, out.join("model.detm"))?;
            fs::write(out.join("history.tsv"), history.to_tsv())?;
            println!(
                "best_epoch={} stopped_epoch={} val_accuracy={:.4}",
                history.best_epoch,
                history.stopped_epoch,
                history.best_val_accuracy()
            );
        }
        Command::Calibrate(a) => {
            let policy = step_config(cli.config.as_deref())?.threshold;
            let model = read_checkpoint(&a.model)?;
            let val = load_dataset(&a.val)?;
            let c = calibrate(&model, &val, &policy)?;
            let out = out_dir(&cli)?;
            fs::create_dir_all(out)?;
            fs::write(out.join("threshold.txt"), format!("{}\n", c.threshold.value()))?;
            fs::write(out.join("threshold_curve.tsv"), c.curve_tsv())?;
            println!("threshold={}", c.threshold.value());
        }
        Command::Eval(a) => {
            let model = read_checkpoint(&a.model)?;
            let test = load_dataset(&a.test)?;
            let (threshold, variant) = if a.ablation == Some(Ablation::NoThreshold) {
                (Threshold::ZERO, VARIANT_MODEL_ONLY)
            } else {
                (parse_threshold(&a.threshold)?, VARIANT_MAIN)
            };
            let pred = predict(&model, &test, threshold)?;
            let report = EvalReport::evaluate(
                &test.labels,
                &pred,
                model.n_classes(),
                threshold.value(),
                RunMeta {
                    dataset: a.dataset.clone(),
                    ratio: a.ratio,
                    seed: cli.seed.unwrap_or(model.config().seed),
                    variant: variant.into(),
                },
            )?;
            match &cli.out {
                Some(p) => fs::write(p, report.to_json() + "\n")?,
                None => println!("{}", report.to_json()),
            }
        }
        Command::Report(a) => {
            let mut all = Vec::new();
            for p in &a.reports {
                all.extend(read_reports(p).with_context(|| format!("reading {}", p.display()))?);
            }
            let out = out_dir(&cli)?;
            fs::create_dir_all(out)?;
            write_summaries(out, &all)?;
            print!("{}", fs::read_to_string(out.join("summary.md"))?);
        }
        Command::Run(a) => {
            let path = cli.config.as_deref().context("run needs --config")?;
            let mut cfg = PipelineConfig::load(path)?;
            if let Some(s) = cli.seed {
                cfg.experiment.seeds = vec![s];
            }
            if a.ablation == Some(Ablation::NoThreshold) {
                cfg.experiment.ablation = true;
            }
            let threads = if cli.deterministic { 1 } else { cli.threads };
            let out = out_dir(&cli)?;
            let res = run_sweep(&cfg, out, threads)?;
            if out.join("summary.md").exists() {
                print!("{}", fs::read_to_string(out.join("summary.md"))?);
            }
            if !res.failures.is_empty() {
                for (r, s, e) in &res.failures {
                    eprintln!("ratio={r} seed={s}: {e}");
                }
                bail!("{} of {} runs failed", res.failures.len(), cfg.jobs().len());
            }
        }
    }
    Ok(())
}

fn parse_threshold(arg: &str) -> Result<Threshold> {
    let text = match arg.parse::<f64>() {
        Ok(v) => return Ok(Threshold::new(v)?),
        Err(_) => fs::read_to_string(arg).with_context(|| format!("reading threshold file {arg}"))?,
    };
    Ok(Threshold::new(text.trim().parse().context("threshold file")?)?)
}

fn cmd_split(cli: &Cli, a: &SplitArgs) -> Result<()> {
    let full = load_dataset(&a.manifest)?;
    let seed = cli.seed.unwrap_or(0);
    let plan = match &a.plan {
        Some(p) => ExperimentPlan::from_toml(&fs::read_to_string(p)?)?,
        None => {
            let name = a.name.clone().unwrap_or_else(|| "dataset".into());
            let mut plan = ExperimentPlan::new(name, full.label_map.known_count(), a.ratio, seed)?;
            plan.outlier_counts = OutlierCounts {
                synthetic: a.synthetic,
                open_domain: a.open_domain,
            };
            plan
        }
    };
    let external = a.external_oos.as_ref().map(load_dataset).transpose()?;
    let pool = match (&a.open_tsdae, &a.open_use) {
        (Some(t), Some(u)) => Some(OutlierBatch::open_domain(
            deter::io::read_embeddings(t)?,
            deter::io::read_embeddings(u)?,
        )?),
        _ => None,
    };
    let synth = SynthConfig {
        seed: deter::seed::derive_seed(plan.seed, deter::seed::STREAM_SYNTH_TRAIN),
        ..SynthConfig::default()
    };
    let b = build_splits(&full, external.as_ref(), pool.as_ref(), &plan, &synth)?;
    let out = out_dir(cli)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("plan.toml"), plan.to_toml())?;
    fs::write(out.join("labels.tsv"), b.remap_tsv())?;
    for (name, ds) in [("train", &b.train), ("val", &b.val), ("test", &b.test)] {
        save_dataset(ds, out.join(name))?;
        println!("{name}: {} rows", ds.len());
    }
    Ok(())
}

fn write_batch(batch: &OutlierBatch, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    write_embeddings(&batch.tsdae, out.join("tsdae.detb"))?;
    write_embeddings(&batch.use_, out.join("use.detb"))?;
    let mut tsv = String::from("id\tkind\talpha\tbeta\ttheta\n");
    for (id, p) in batch.ids.iter().zip(&batch.provenance) {
        match p {
            Provenance::Synthetic { alpha, beta, theta } => {
                tsv.push_str(&format!("{id}\tsynthetic\t{alpha}\t{beta}\t{theta}\n"))
            }
            Provenance::OpenDomain { row } => tsv.push_str(&format!("{id}\topen_domain\t{row}\t-\t-\n")),
        }
    }
    fs::write(out.join("provenance.tsv"), tsv)?;
    println!("{} outliers written to {}", batch.len(), out.display());
    Ok(())
}
