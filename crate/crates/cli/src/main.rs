use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use dips_core::config::RunConfig;
use dips_core::data::{generate_synthetic_dataset, DatasetInfo, Manifest, SyntheticDatasetSpec};
use dips_core::metrics::ThresholdSweep;
use dips_core::pipeline::ablate::{ablate, DEFAULT_LOSS_SETS};
use dips_core::pipeline::evaluate::evaluate;
use dips_core::pipeline::infer::{checkpoint_run_config, infer_manifest, Inferencer};
use dips_core::pipeline::train::train;
use dips_core::pipeline::{
    build_attention, build_classifier, dataset_info, harvest_cache_path, harvest_item, load_split, ItemContext,
};
use dips_core::plot::plot_sweep;

#[derive(Parser)]
#[command(
    name = "dips",
    version,
    about = "Weakly-supervised object localization from transformer attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shapes dataset.
    GenerateData(GenerateArgs),
    /// Precompute proposals for the training split.
    Harvest(HarvestArgs),
    /// Train the localization network.
    Train(TrainArgs),
    /// Predict foreground maps and class scores.
    Infer(InferArgs),
    /// Score predictions against a manifest.
    Evaluate(EvaluateArgs),
    /// Plot a threshold sweep CSV as SVG.
    Plot(PlotArgs),
    /// Train and evaluate one run per loss set and seed.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Small network and pooled CRF, sized for a laptop CPU.
    Desk,
    /// The full-size network.
    Full,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults used for keys the file leaves out.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Dataset directory (same as `--set data.dir=...`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override one key, e.g. `--set optim.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match self.preset {
            Preset::Desk => RunConfig::desk(),
            Preset::Full => RunConfig::default(),
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            // file keys are applied on top of the preset
            cfg.apply_text(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
        }
        if let Some(d) = &self.data {
            cfg.data.dir = d.clone();
        }
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct HarvestArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Epochs to harvest (proposals depend on the epoch's augmentation).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    epochs: Vec<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Active loss terms, e.g. `cpa+crf`.
    #[arg(long)]
    losses: Option<String>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest of the images to predict.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory for the classifier; defaults to the one recorded
    /// in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Label for the report; defaults to the loss set recorded at inference.
    #[arg(long)]
    tag: Option<String>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    sweep: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "MaxBoxAcc over map thresholds")]
    title: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Loss sets separated by commas.
    #[arg(long, value_delimiter = ',')]
    losses: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let mut spec = SyntheticDatasetSpec::with_counts(a.train, a.val, a.test, a.classes, a.seed);
    spec.image_size = a.size;
    let paths = generate_synthetic_dataset(&spec, &a.out, a.force)?;
    info!(
        "wrote {} images; train manifest {}",
        spec.num_images,
        paths.train.display()
    );
    Ok(())
}

fn harvest(a: &HarvestArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let info = dataset_info(&cfg)?;
    let samples = load_split(&cfg, &info, &cfg.data.train)?;
    let attention = build_attention(&cfg.backbone, &info)?;
    let classifier = build_classifier(&cfg.classifier, &info)?;
    let ctx = ItemContext::new(&cfg, &info, attention.as_ref(), classifier.as_ref())?;
    let mut fallbacks = 0;
    for &epoch in &a.epochs {
        for (i, s) in samples.iter().enumerate() {
            let (_, _, record, _) = harvest_item(&ctx, s, i as u64, epoch)?;
            fallbacks += record.fallback as usize;
            let path = harvest_cache_path(&a.out, epoch, &s.id);
            fs::create_dir_all(path.parent().expect("cache file has a parent"))?;
            fs::write(&path, record.to_bytes()?)?;
        }
    }
    info!(
        "harvested {} images over {} epochs ({fallbacks} whole-image fallbacks)",
        samples.len(),
        a.epochs.len()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(set) = &a.losses {
        cfg.loss.apply_loss_set(set)?;
    }
    let outcome = train(&cfg, &a.out, a.resume.as_deref())?;
    if let Some(e) = outcome.epochs.last() {
        info!("finished epoch {} with loss {:.4}", e.epoch, e.mean_total);
    }
    println!("{}", outcome.best.unwrap_or(outcome.last).display());
    Ok(())
}

fn infer(a: &InferArgs) -> Result<()> {
    let ckpt = dips_core::model::Checkpoint::load(&a.checkpoint)?;
    let run = checkpoint_run_config(&ckpt)?;
    let data_dir = a.data.clone().unwrap_or(run.data.dir.clone());
    let info = DatasetInfo::read(&data_dir)?;
    let classifier = build_classifier(&run.classifier, &info)?;
    let inferencer = Inferencer::new(ckpt.model, classifier);
    let manifest = Manifest::read(&a.manifest)?;
    infer_manifest(&inferencer, &manifest, &a.out, Some(run.loss.loss_set_tag()))?;
    info!("wrote {} maps to {}", manifest.records.len(), a.out.display());
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let report = evaluate(&a.predictions, &a.manifest, &a.out, a.tag.clone())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn plot(a: &PlotArgs) -> Result<()> {
    let sweep = ThresholdSweep::read_csv(&a.sweep)?;
    plot_sweep(&sweep, &a.out, &a.title)?;
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let sets: Vec<String> = if a.losses.is_empty() {
        DEFAULT_LOSS_SETS.iter().map(|s| s.to_string()).collect()
    } else {
        a.losses.clone()
    };
    let runs = ablate(&cfg, &sets, &a.seeds, &a.out)?;
    print!(
        "{}",
        fs::read_to_string(a.out.join(dips_core::pipeline::ablate::ABLATION_FILE))?
    );
    info!("{} runs", runs.len());
    Ok(())
}

fn ensure_dir(p: &Path) -> Result<()> {
    if p.exists() && !p.is_dir() {
        bail!("{} exists and is not a directory", p.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Harvest(a) => {
            ensure_dir(&a.out)?;
            harvest(a)
        }
        Command::Train(a) => {
            ensure_dir(&a.out)?;
            train_cmd(a)
        }
        Command::Infer(a) => infer(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Plot(a) => plot(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}
