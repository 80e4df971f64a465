//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};

use radm_core::checkpoint::{load_checkpoint, save_checkpoint};
use radm_core::dataset::{load_dataset, load_manifest, load_rgb, load_sample, save_dataset, save_rgb};
use radm_core::diffusion::{sample, DiffusionSchedule};
use radm_core::experiments::{ablation_csv, overfit_model_config, overfit_train_config, run_ablation, AblationConfig};
use radm_core::metrics::{per_sample_csv, reports_csv, MetricsConfig};
use radm_core::model::ModuleFlags;
use radm_core::render::render_layout;
use radm_core::request::{trajectory_jsonl, GenerateRequest, ImageRef};
use radm_core::synth::{generate, SynthSpec};
use radm_core::training::{prepare_all, TrainConfig, Trainer};
use radm_core::{Layout, ModelConfig};

/// Starting model and optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Desk-scale defaults.
    Default,
    /// Small model for quick experiments.
    Tiny,
    /// Small model, signal scale 2 and learning rate 1e-3.
    Overfit,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Default => ModelConfig::default(),
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Overfit => overfit_model_config(),
        }
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Preset::Overfit => overfit_train_config(ModuleFlags::FULL, 0),
            _ => TrainConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SynthSpec::default().count)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthSpec::default().canvas.0)]
    pub width: u32,
    #[arg(long, default_value_t = SynthSpec::default().canvas.1)]
    pub height: u32,
    #[arg(long, default_value_t = SynthSpec::default().underlay_prob)]
    pub underlay_prob: f64,
    #[arg(long, default_value_t = SynthSpec::default().embellish_prob)]
    pub embellish_prob: f64,
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        count: a.count,
        seed: a.seed,
        canvas: (a.width, a.height),
        underlay_prob: a.underlay_prob,
        embellish_prob: a.embellish_prob,
        ..SynthSpec::default()
    };
    let samples = generate(&spec)?;
    save_dataset(&a.out, &samples)?;
    eprintln!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory with a manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// JSON model configuration; overrides the preset's.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// full, no-vtram, no-gram or no-relations.
    #[arg(long, default_value = "full")]
    pub variant: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// JSONL training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let model_cfg = match &a.model_config {
        Some(p) => read_json(p)?,
        None => a.preset.model(),
    };
    let base = a.preset.train();
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(base.epochs),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        lr: a.lr.unwrap_or(base.lr),
        weight_decay: a.weight_decay.unwrap_or(base.weight_decay),
        seed: a.seed.unwrap_or(base.seed),
        flags: ModuleFlags::parse(&a.variant)?,
        max_steps: a.max_steps.or(base.max_steps),
        ..base
    };
    let samples = load_dataset(&a.data)?;
    let data = prepare_all(&samples, &model_cfg)?;
    let mut trainer = Trainer::new(model_cfg, cfg)?;
    let mut log = match &a.log {
        Some(p) => Some(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => None,
    };
    let records = trainer.fit(&data, log.as_mut().map(|f| f as &mut dyn Write))?;
    save_checkpoint(&a.out, &trainer.model, &trainer.cfg, trainer.step)?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        eprintln!(
            "trained {} steps: loss {:.4} -> {:.4}; checkpoint {}",
            records.len(),
            first.total,
            last.total,
            a.out.display()
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, env = "RADM_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Background image.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Dataset directory, for --sample.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset sample whose background is used.
    #[arg(long)]
    pub sample: Option<String>,
    /// One slogan; repeatable.
    #[arg(long = "slogan")]
    pub slogans: Vec<String>,
    /// File with one slogan per line.
    #[arg(long)]
    pub slogans_file: Option<PathBuf>,
    /// GenerateRequest JSON with slogans, pins, steps and seed.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Layout JSON output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Rendered overlay PNG.
    #[arg(long)]
    pub render: Option<PathBuf>,
    /// Per-step trajectory JSONL.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
}

/// Merges the constraints file with command-line overrides.
pub fn build_request(a: &GenerateArgs) -> Result<GenerateRequest> {
    let mut req = match &a.constraints {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            GenerateRequest::parse(&bytes).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?
        }
        None => GenerateRequest::default(),
    };
    let mut slogans = a.slogans.clone();
    if let Some(p) = &a.slogans_file {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        slogans.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
    }
    if !slogans.is_empty() {
        req.slogans = slogans;
    }
    if let Some(s) = a.steps {
        req.steps = s;
    }
    if let Some(s) = a.seed {
        req.seed = s;
    }
    if let Some(p) = &a.image {
        req.image = Some(ImageRef::Path(p.clone()));
        req.sample_id = None;
    } else if let Some(id) = &a.sample {
        req.sample_id = Some(id.clone());
        req.image = None;
    }
    req.trajectory = a.trajectory.is_some();
    Ok(req)
}

pub fn generate_cmd(a: &GenerateArgs) -> Result<()> {
    let req = build_request(a)?;
    let ckpt = load_checkpoint(&a.checkpoint, None)?;
    req.validate(&ckpt.model.cfg, true)?;
    let image = match (&req.image, &req.sample_id) {
        (Some(ImageRef::Path(p)), _) => load_rgb(p)?,
        (Some(ImageRef::Base64(_)), _) => req.inline_image()?.expect("base64 image"),
        (None, Some(id)) => {
            let dir = a.data.as_ref().context("--sample needs --data")?;
            let rec = load_manifest(dir)?
                .into_iter()
                .find(|r| &r.id == id)
                .with_context(|| format!("no sample {id:?} in {}", dir.display()))?;
            load_sample(dir, &rec)?.image
        }
        (None, None) => bail!("give --image, --sample or an image in the constraints file"),
    };
    let schedule = DiffusionSchedule::new(ckpt.model.cfg.steps, ckpt.model.cfg.schedule)?;
    let g = sample(&ckpt.model, &schedule, &image, &req.constraints(), &req.options())?;
    let json = g.layout.to_json();
    match &a.out {
        Some(p) => fs::write(p, &json)?,
        None => println!("{json}"),
    }
    if let Some(p) = &a.render {
        save_rgb(p, &render_layout(&g.layout, &image))?;
    }
    if let Some(p) = &a.trajectory {
        fs::write(p, trajectory_jsonl(&g.trajectory))?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory with backgrounds and saliency maps.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of `<sample id>.json` layouts.
    #[arg(long, conflicts_with = "ground_truth")]
    pub layouts: Option<PathBuf>,
    /// Evaluate the dataset's own ground-truth layouts.
    #[arg(long)]
    pub ground_truth: bool,
    /// CSV report; stdout when neither --csv nor --json is given.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Per-layout CSV breakdown.
    #[arg(long)]
    pub per_sample: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    pub label: String,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let samples = load_dataset(&a.data)?;
    let layouts: Vec<Layout> = match (&a.layouts, a.ground_truth) {
        (_, true) => samples.iter().map(|s| s.gt.clone()).collect(),
        (Some(dir), false) => samples
            .iter()
            .map(|s| {
                let p = dir.join(format!("{}.json", s.id));
                let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                Layout::from_json(&text).with_context(|| format!("parsing {}", p.display()))
            })
            .collect::<Result<_>>()?,
        (None, false) => bail!("give --layouts DIR or --ground-truth"),
    };
    let (report, per) = radm_core::experiments::evaluate_layouts(&samples, &layouts, &MetricsConfig::default())?;
    let csv = reports_csv("label", &[(a.label.clone(), report.clone())])?;
    if let Some(p) = &a.csv {
        fs::write(p, &csv)?;
    }
    if let Some(p) = &a.json {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    if a.csv.is_none() && a.json.is_none() {
        print!("{csv}");
    }
    if let Some(p) = &a.per_sample {
        fs::write(p, per_sample_csv(&per)?)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated variants.
    #[arg(long, value_delimiter = ',', default_value = "full,no-vtram,no-gram")]
    pub variants: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, value_enum, default_value_t = Preset::Overfit)]
    pub preset: Preset,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Sampling steps used when scoring.
    #[arg(long)]
    pub steps: Option<usize>,
    /// CSV table; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let samples = load_dataset(&a.data)?;
    let mut cfg = AblationConfig::overfit();
    cfg.model = a.preset.model();
    cfg.train = a.preset.train();
    if let Some(m) = a.max_steps {
        cfg.train.max_steps = Some(m);
    }
    if let Some(s) = a.steps {
        cfg.sampling.steps = s;
    }
    cfg.variants = a.variants.iter().map(|v| ModuleFlags::parse(v)).collect::<radm_core::Result<_>>()?;
    cfg.seeds = a.seeds.clone();
    let rows = run_ablation(&samples, &cfg, |r, _| {
        eprintln!(
            "{} seed {}: loss {:.4}, r_ove {:.4}, r_com {:.4}",
            r.variant, r.seed, r.final_loss, r.report.r_ove, r.report.r_com
        )
    })?;
    let csv = ablation_csv(&rows)?;
    match &a.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
