//! The overfit protocol and the ablation harness: train variants on a fixed
//! synthetic set, generate a layout per training background and score them.

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, DiffusionSchedule, GenerationConstraints, SampleOptions};
use crate::error::{invalid, Error, Result};
use crate::metrics::{evaluate, matched_ious, occupancy, EvalItem, LayoutMetrics, MetricsConfig, MetricsReport};
use crate::model::{ModuleFlags, RadmModel};
use crate::synth::SynthSpec;
use crate::training::{prepare_all, LogRecord, TrainConfig, Trainer};
use crate::types::{ElementClass, Layout, ModelConfig, PosterSample};

/// Seed of the generation noise used when scoring a trained model.
pub const GENERATION_SEED: u64 = 1;

/// The 32-sample synthetic set used for overfitting.
pub fn overfit_synth() -> SynthSpec {
    SynthSpec {
        count: 32,
        seed: 7,
        canvas: (96, 150),
        ..SynthSpec::default()
    }
}

pub fn overfit_model_config() -> ModelConfig {
    ModelConfig {
        signal_scale: 2.0,
        ..ModelConfig::tiny()
    }
}

pub fn overfit_train_config(flags: ModuleFlags, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 16,
        epochs: 1000,
        max_steps: Some(2000),
        seed,
        flags,
        ..TrainConfig::default()
    }
}

/// Generates one layout per sample from its own background and slogans.
pub fn generate_layouts(
    model: &RadmModel<f32>,
    schedule: &DiffusionSchedule,
    samples: &[PosterSample],
    opts: &SampleOptions,
    seed: u64,
) -> Result<Vec<Layout>> {
    samples
        .iter()
        .map(|s| {
            let c = GenerationConstraints {
                pinned: Vec::new(),
                slogans: s.slogans.clone(),
                seed,
            };
            Ok(sample(model, schedule, &s.image, &c, opts)?.layout)
        })
        .collect()
}

fn check_pairs(samples: &[PosterSample], layouts: &[Layout]) -> Result<()> {
    if samples.len() != layouts.len() {
        return Err(invalid(format!("{} samples but {} layouts", samples.len(), layouts.len())));
    }
    if samples.is_empty() {
        return Err(invalid("nothing to evaluate"));
    }
    Ok(())
}

pub fn evaluate_layouts(
    samples: &[PosterSample],
    layouts: &[Layout],
    cfg: &MetricsConfig,
) -> Result<(MetricsReport, Vec<LayoutMetrics>)> {
    check_pairs(samples, layouts)?;
    let items: Vec<EvalItem> = samples
        .iter()
        .zip(layouts)
        .map(|(s, l)| EvalItem {
            id: &s.id,
            layout: l,
            image: &s.image,
            saliency: &s.saliency,
        })
        .collect();
    evaluate(&items, cfg)
}

/// How closely generated layouts reproduce their ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitQuality {
    /// Mean matched IoU over all ground-truth elements.
    pub mean_iou: f64,
    /// Fraction of samples whose text count equals their slogan count.
    pub text_match: f64,
    pub occupancy: f64,
}

pub fn fit_quality(samples: &[PosterSample], layouts: &[Layout]) -> Result<FitQuality> {
    check_pairs(samples, layouts)?;
    let ious: Vec<f64> = samples.iter().zip(layouts).flat_map(|(s, l)| matched_ious(l, &s.gt)).collect();
    let texts = samples
        .iter()
        .zip(layouts)
        .filter(|(s, l)| l.count(ElementClass::Text) == s.slogans.len())
        .count();
    Ok(FitQuality {
        mean_iou: if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 },
        text_match: texts as f64 / samples.len() as f64,
        occupancy: occupancy(layouts)?,
    })
}

/// A trained variant with its training log and generated layouts.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub trainer: Trainer,
    pub log: Vec<LogRecord>,
    pub layouts: Vec<Layout>,
}

/// Trains a fresh model on `samples` and generates a layout for each.
pub fn train_and_generate(
    samples: &[PosterSample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: &SampleOptions,
) -> Result<TrainedRun> {
    let data = prepare_all(samples, model_cfg)?;
    let mut trainer = Trainer::new(model_cfg.clone(), train_cfg.clone())?;
    let log = trainer.fit(&data, None)?;
    let layouts = generate_layouts(&trainer.model, &trainer.schedule, samples, opts, GENERATION_SEED)?;
    Ok(TrainedRun { trainer, log, layouts })
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub model: ModelConfig,
    /// Template; `flags` and `seed` are overwritten per run.
    pub train: TrainConfig,
    pub variants: Vec<ModuleFlags>,
    pub seeds: Vec<u64>,
    pub sampling: SampleOptions,
    pub metrics: MetricsConfig,
}

impl AblationConfig {
    pub fn overfit() -> Self {
        Self {
            model: overfit_model_config(),
            train: overfit_train_config(ModuleFlags::FULL, 0),
            variants: vec![ModuleFlags::FULL, ModuleFlags::NO_VTRAM, ModuleFlags::NO_GRAM],
            seeds: vec![0, 1, 2],
            sampling: SampleOptions::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub final_loss: f64,
    pub fit: FitQuality,
    pub report: MetricsReport,
}

/// Trains every variant under every seed on the same data and scores it.
/// `on_run` sees each row as soon as it is complete.
pub fn run_ablation(
    samples: &[PosterSample],
    cfg: &AblationConfig,
    mut on_run: impl FnMut(&AblationRow, &TrainedRun),
) -> Result<Vec<AblationRow>> {
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(invalid("ablation needs at least one variant and one seed"));
    }
    let mut rows = Vec::new();
    for &flags in &cfg.variants {
        for &seed in &cfg.seeds {
            let train = TrainConfig {
                flags,
                seed,
                ..cfg.train.clone()
            };
            let run = train_and_generate(samples, &cfg.model, &train, &cfg.sampling)?;
            let (report, _) = evaluate_layouts(samples, &run.layouts, &cfg.metrics)?;
            let row = AblationRow {
                variant: flags.name().to_string(),
                seed,
                final_loss: run.log.last().map_or(f64::NAN, |r| r.total),
                fit: fit_quality(samples, &run.layouts)?,
                report,
            };
            on_run(&row, &run);
            rows.push(row);
        }
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    invalid(format!("csv: {e}"))
}

/// One CSV row per run: variant, seed, final loss, fit quality and metrics.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = ["variant", "seed", "final_loss", "mean_iou", "text_match"]
        .into_iter()
        .chain(MetricsReport::CSV_HEADER)
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let rec: Vec<String> = [
            r.variant.clone(),
            r.seed.to_string(),
            format!("{}", r.final_loss),
            format!("{}", r.fit.mean_iou),
            format!("{}", r.fit.text_match),
        ]
        .into_iter()
        .chain(r.report.csv_values())
        .collect();
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Median over `values`; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Median of one metric across the seeds of `variant`.
pub fn variant_median(rows: &[AblationRow], variant: &str, metric: impl Fn(&AblationRow) -> f64) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(metric).collect();
    median(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate;
    use crate::types::{BBox, Element};

    #[test]
    fn median_cases() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn ground_truth_fits_itself() {
        let samples = generate(&SynthSpec { count: 4, ..overfit_synth() }).unwrap();
        let gts: Vec<Layout> = samples.iter().map(|s| s.gt.clone()).collect();
        let q = fit_quality(&samples, &gts).unwrap();
        assert_eq!(q, FitQuality { mean_iou: 1.0, text_match: 1.0, occupancy: 1.0 });
        let (r, per) = evaluate_layouts(&samples, &gts, &MetricsConfig::default()).unwrap();
        assert_eq!(per.len(), 4);
        assert_eq!(r.r_ove, 0.0);
        assert_eq!(r.r_und_valid, 1.0);
    }

    #[test]
    fn fit_quality_counts_texts_and_misses() {
        let samples = generate(&SynthSpec { count: 2, ..overfit_synth() }).unwrap();
        let (w, h) = (samples[0].image.width, samples[0].image.height);
        let one = Layout::new(w, h, vec![Element::new(ElementClass::Logo, BBox::new(0.9, 0.9, 0.05, 0.05))]);
        let q = fit_quality(&samples, &[one, Layout::empty(w, h)]).unwrap();
        assert_eq!(q.text_match, 0.0);
        assert_eq!(q.occupancy, 0.5);
        assert!(q.mean_iou < 0.1);
        assert!(fit_quality(&samples, &[]).is_err());
    }

    #[test]
    fn tiny_ablation_is_deterministic() {
        let samples = generate(&SynthSpec { count: 2, ..overfit_synth() }).unwrap();
        let cfg = AblationConfig {
            train: TrainConfig {
                max_steps: Some(2),
                batch_size: 2,
                ..overfit_train_config(ModuleFlags::FULL, 0)
            },
            seeds: vec![0],
            sampling: SampleOptions { steps: 4, ..SampleOptions::default() },
            ..AblationConfig::overfit()
        };
        let mut seen = 0;
        let a = run_ablation(&samples, &cfg, |_, run| {
            seen += 1;
            assert_eq!(run.trainer.step, 2);
        })
        .unwrap();
        assert_eq!(seen, 3);
        let b = run_ablation(&samples, &cfg, |_, _| {}).unwrap();
        assert_eq!(ablation_csv(&a).unwrap(), ablation_csv(&b).unwrap());
        let csv = ablation_csv(&a).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("variant,seed,final_loss,mean_iou,text_match,r_ali"));
        assert!(variant_median(&a, "no-gram", |r| r.report.r_ove).is_some());
    }
}
