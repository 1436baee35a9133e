//! Subcommands of the `cor` binary, callable from tests as plain functions.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use cor_core::baseline::{evaluate_baseline, StagePipeline};
use cor_core::dataset::synth::{synth_generate, SynthConfig};
use cor_core::dataset::{fixture as six, load_manifest, split_summary, stats, Manifest, Split};
use cor_core::metrics::EvalReport;
use cor_core::numerics::checkpoint;
use cor_core::pipeline::fixture::{fixture_config, fixture_script, write_fixture};
use cor_core::pipeline::{run_pipeline, ColorHistogram, HttpConfig, HttpVlm, PipelineConfig, RawAnnotations, ScriptedVlm, VlmClient};
use cor_core::report::{comparison, read_eval_report, write_eval_report};
use cor_core::train::{evaluate_model, prepare_split, train, EpochLog, TrainConfig};
use cor_core::{Ablation, CoreModel, Expression, ModelConfig};

#[derive(Parser, Debug)]
#[command(name = "cor", version, about = "Composed object retrieval: train, evaluate and build datasets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on the train split of a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint or the baseline on one split.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Generate the synthetic shape world or a shipped fixture.
    Synth(SynthArgs),
    /// Build a dataset from raw instance annotations.
    Pipeline(PipelineArgs),
    /// Dataset statistics of a manifest.
    Stats(StatsArgs),
    /// Side-by-side tables from several evaluation reports.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the checkpoint, its configuration and the log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 6)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Replace the region embedding with masked pooling.
    #[arg(long)]
    pub no_rre: bool,
    /// Replace the fusion module with a plain sum.
    #[arg(long)]
    pub no_avti: bool,
    /// Drop the contrastive alignment loss.
    #[arg(long)]
    pub no_lcor: bool,
    #[arg(long, default_value = "full")]
    pub expr: Expression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Core,
    Baseline,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Training output directory (needed for `--method core`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Method::Core)]
    pub method: Method,
    #[arg(long, default_value = "test_base")]
    pub split: Split,
    /// Directory for report.txt and report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Row label in the report.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Multiplies every analytic gradient before comparison; anything but 1
    /// must fail.
    #[arg(long, default_value_t = 1.0, hide = true)]
    pub analytic_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FixtureKind {
    /// The synthetic shape world.
    World,
    /// Six 4x4 samples, one per setting.
    SixSetting,
    /// Twenty annotated images plus a validator script for `cor pipeline`.
    Pipeline,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 300)]
    pub train: usize,
    #[arg(long, default_value_t = 60)]
    pub test_base: usize,
    #[arg(long, default_value_t = 0)]
    pub test_novel: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, value_enum, default_value_t = FixtureKind::World)]
    pub fixture: FixtureKind,
}

#[derive(Args, Debug, Clone)]
pub struct PipelineArgs {
    /// Raw annotation file; image and mask paths are relative to its directory.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Scripted validator replies (JSON); without it COR_VLM_ENDPOINT is used.
    #[arg(long)]
    pub mock: Option<PathBuf>,
    /// Pipeline configuration (JSON); defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stage snapshots for resuming.
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for stats.txt, stats.json and categories.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    /// report.json files from `cor eval`, one row each.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Written next to the checkpoint so that evaluation can rebuild the model.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "model.json";
pub const LOG_FILE: &str = "train_log.tsv";

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn run_configs(args: &TrainArgs) -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        ablation: Ablation { no_rre: args.no_rre, no_avti: args.no_avti, expr: args.expr },
        seed: args.seed,
        ..ModelConfig::default()
    };
    let mut train = TrainConfig { epochs: args.epochs, lr: args.lr, batch_size: args.batch_size, seed: args.seed, ..TrainConfig::default() };
    train.loss.contrastive = !args.no_lcor;
    (model, train)
}

pub fn cmd_train(args: &TrainArgs) -> Result<Vec<EpochLog>> {
    let manifest = load_manifest(&args.manifest)?;
    let root = manifest_root(&args.manifest);
    let (model_cfg, train_cfg) = run_configs(args);
    let mut model = CoreModel::new(model_cfg.clone())?;
    let data = prepare_split(&model, &manifest, &root, Split::Train)?;
    if data.is_empty() {
        bail!("{} has no train samples", args.manifest.display());
    }
    let frozen_before: Vec<Vec<f64>> = model.frozen_ids().iter().map(|id| model.store.tensor(*id).data().to_vec()).collect();
    let logs = train(&mut model, &data, &train_cfg)?;
    let frozen_after: Vec<Vec<f64>> = model.frozen_ids().iter().map(|id| model.store.tensor(*id).data().to_vec()).collect();
    if frozen_before != frozen_after {
        bail!("a frozen parameter changed during training");
    }

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    checkpoint::save(&model.store, &args.out.join(CHECKPOINT_FILE))?;
    write(&args.out.join(CONFIG_FILE), &json(&RunConfig { model: model_cfg, train: train_cfg.clone() })?)?;
    let mut log = EpochLog::header(train_cfg.loss.contrastive);
    log.push('\n');
    for l in &logs {
        log.push_str(&l.row());
        log.push('\n');
    }
    write(&args.out.join(LOG_FILE), &log)?;
    Ok(logs)
}

/// Rebuilds a trained model from a `cor train` output directory.
pub fn load_model(dir: &Path) -> Result<CoreModel> {
    let path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut model = CoreModel::new(cfg.model)?;
    checkpoint::load(&mut model.store, &dir.join(CHECKPOINT_FILE))?;
    Ok(model)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let manifest = load_manifest(&args.manifest)?;
    let root = manifest_root(&args.manifest);
    let mut report = match args.method {
        Method::Baseline => evaluate_baseline(&manifest, &root, args.split, &StagePipeline::default())?,
        Method::Core => {
            let dir = args.checkpoint.as_ref().context("--checkpoint is required for --method core")?;
            let model = load_model(dir)?;
            let data = prepare_split(&model, &manifest, &root, args.split)?;
            evaluate_model(&model, &data)?
        }
    };
    if report.splits.is_empty() {
        bail!("split {} of {} is empty", args.split, args.manifest.display());
    }
    if let Some(name) = &args.name {
        report.method = name.clone();
    }
    if let Some(out) = &args.out {
        write_eval_report(&report, out)?;
    }
    Ok(report)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<Manifest> {
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    match args.fixture {
        FixtureKind::World => {
            let cfg = SynthConfig {
                train: args.train,
                test_base: args.test_base,
                test_novel: args.test_novel,
                image_size: args.size,
                ..SynthConfig::default()
            };
            Ok(synth_generate(&cfg, args.seed, &args.out)?)
        }
        FixtureKind::SixSetting => Ok(six::write_six_setting(&args.out)?),
        FixtureKind::Pipeline => {
            write_fixture(&args.out)?;
            write(&args.out.join("mock.json"), &json(&fixture_script())?)?;
            write(&args.out.join("pipeline.json"), &json(&fixture_config())?)?;
            Ok(Manifest::default())
        }
    }
}

/// Returns the number of samples written.
pub fn cmd_pipeline(args: &PipelineArgs) -> Result<usize> {
    let annotations = RawAnnotations::load(&args.annotations)?;
    let root = manifest_root(&args.annotations);
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let client: Box<dyn VlmClient> = match &args.mock {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Box::new(ScriptedVlm::from_json(&text)?)
        }
        None => Box::new(HttpVlm::new(HttpConfig::from_env()?)),
    };
    let out = run_pipeline(&root, annotations, &cfg, client.as_ref(), &ColorHistogram::default(), args.work_dir.as_deref())?;
    out.write(&root, &args.out)?;
    Ok(out.manifest.samples.len())
}

pub fn cmd_stats(args: &StatsArgs) -> Result<String> {
    let manifest = load_manifest(&args.manifest)?;
    let table = stats(&manifest);
    let text = table.to_text();
    if let Some(out) = &args.out {
        write(&out.join("stats.txt"), &text)?;
        write(&out.join("stats.json"), &json(&table)?)?;
        write(&out.join("categories.json"), &json(&split_summary(&manifest))?)?;
    }
    Ok(text)
}

pub fn cmd_report(args: &ReportArgs) -> Result<String> {
    let reports = args.inputs.iter().map(|p| read_eval_report(p)).collect::<cor_core::Result<Vec<_>>>()?;
    let text = comparison(&reports);
    if let Some(out) = &args.out {
        write(out, &text)?;
    }
    Ok(text)
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(a) => {
            let logs = cmd_train(&a)?;
            println!("{}", EpochLog::header(!a.no_lcor));
            for l in &logs {
                println!("{}", l.row());
            }
            println!("checkpoint written to {}", a.out.display());
        }
        Command::Eval(a) => print!("{}", cmd_eval(&a)?.to_text()),
        Command::Gradcheck(a) => {
            let table = cor_core::verify::run_suite(a.analytic_scale)?;
            let text = table.to_text();
            print!("{text}");
            if let Some(out) = &a.out {
                write(out, &text)?;
            }
            if !table.all_passed() {
                eprintln!("gradient check failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Synth(a) => {
            let m = cmd_synth(&a)?;
            if a.fixture == FixtureKind::Pipeline {
                println!("annotations, mock.json and pipeline.json written to {}", a.out.display());
            } else {
                println!("{} samples written to {}", m.samples.len(), a.out.display());
            }
        }
        Command::Pipeline(a) => {
            let n = cmd_pipeline(&a)?;
            println!("{n} samples written to {}", a.out.display());
        }
        Command::Stats(a) => print!("{}", cmd_stats(&a)?),
        Command::Report(a) => print!("{}", cmd_report(&a)?),
    }
    Ok(ExitCode::SUCCESS)
}
