//! End-to-end runs shared by the determinism and overfit checks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use radm_core::checkpoint::encode_checkpoint;
use radm_core::dataset::{load_dataset, save_dataset};
use radm_core::diffusion::{sample, DiffusionSchedule, GenerationConstraints, SampleOptions};
use radm_core::experiments::{evaluate_layouts, generate_layouts, GENERATION_SEED};
use radm_core::metrics::{reports_csv, MetricsConfig};
use radm_core::model::{ModuleFlags, RadmModel};
use radm_core::synth::{generate, SynthSpec};
use radm_core::training::{prepare_all, TrainConfig, Trainer};
use radm_core::{BBox, Element, ElementClass, ModelConfig, PosterSample};

/// Everything a pipeline run produces, as bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineOutput {
    pub checkpoint: Vec<u8>,
    pub train_log: String,
    pub layouts: String,
    pub report: String,
}

/// synth → save/load → train 50 steps → generate → eval, inside `dir`.
pub fn run_pipeline(dir: &Path, seed: u64) -> PipelineOutput {
    let spec = SynthSpec {
        count: 6,
        seed,
        canvas: (48, 75),
        ..SynthSpec::default()
    };
    let data = dir.join("data");
    save_dataset(&data, &generate(&spec).unwrap()).unwrap();
    let samples = load_dataset(&data).unwrap();
    let cfg = ModelConfig::tiny();
    let train = TrainConfig {
        batch_size: 4,
        lr: 1e-3,
        seed,
        max_steps: Some(50),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg.clone(), train.clone()).unwrap();
    let mut log = Vec::new();
    trainer.fit(&prepare_all(&samples, &cfg).unwrap(), Some(&mut log)).unwrap();
    assert_eq!(trainer.step, 50);
    let opts = SampleOptions {
        steps: 10,
        ..SampleOptions::default()
    };
    let layouts = generate_layouts(&trainer.model, &trainer.schedule, &samples, &opts, GENERATION_SEED).unwrap();
    let (report, _) = evaluate_layouts(&samples, &layouts, &MetricsConfig::default()).unwrap();
    PipelineOutput {
        checkpoint: encode_checkpoint(&trainer.model, &train, trainer.step).unwrap(),
        train_log: String::from_utf8(log).unwrap(),
        layouts: serde_json::to_string(&layouts).unwrap(),
        report: reports_csv("run", &[("run".into(), report)]).unwrap(),
    }
}

/// Issues `requests` generation calls with 1 to N random pins each against
/// the given backgrounds and counts the requests whose output contains every
/// pin bitwise.
pub fn pins_hold(
    model: &RadmModel<f32>,
    schedule: &DiffusionSchedule,
    samples: &[PosterSample],
    requests: usize,
    steps: usize,
    seed: u64,
) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.cfg.n_queries;
    let classes = [ElementClass::Logo, ElementClass::Text, ElementClass::Underlay, ElementClass::Embellishment];
    let mut ok = 0;
    for r in 0..requests {
        let s = &samples[r % samples.len()];
        let mut slots: Vec<usize> = (0..n).collect();
        let count = rng.random_range(1..=n);
        let pinned: Vec<(usize, Element)> = (0..count)
            .map(|_| {
                let slot = slots.swap_remove(rng.random_range(0..slots.len()));
                let b = BBox::new(
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.02..0.4),
                    rng.random_range(0.02..0.4),
                );
                (slot, Element::new(classes[rng.random_range(0..4)], b))
            })
            .collect();
        let c = GenerationConstraints {
            pinned: pinned.clone(),
            slogans: s.slogans.clone(),
            seed: rng.random(),
        };
        let opts = SampleOptions {
            steps,
            ..SampleOptions::default()
        };
        let out = sample(model, schedule, &s.image, &c, &opts).unwrap().layout;
        let all = pinned.iter().all(|(_, p)| {
            out.elements
                .iter()
                .any(|e| e.cls == p.cls && e.bbox.to_array().map(f64::to_bits) == p.bbox.to_array().map(f64::to_bits))
        });
        ok += all as usize;
    }
    ok
}

pub fn untrained_model(seed: u64) -> RadmModel<f32> {
    RadmModel::new(ModelConfig::tiny(), ModuleFlags::FULL, seed).unwrap()
}
