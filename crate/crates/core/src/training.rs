//! Denoising training: corrupt padded ground truth, reconstruct it, and
//! update the active parameters with AdamW.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape};
use crate::diffusion::{DiffusionSchedule, SignalCodec};
use crate::encoders::{preprocess, StemImage};
use crate::error::{invalid, Error, Result};
use crate::loss::{training_loss, LossBreakdown};
use crate::model::{ModuleFlags, RadmModel};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::types::{BBox, ElementClass, ModelConfig, PosterSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub flags: ModuleFlags,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 2.5e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            flags: ModuleFlags::FULL,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.weight_decay > 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid(format!("weight decay {} must be positive", self.weight_decay)));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("{name} = {b} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam over `f32` parameters.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    moments: Vec<Option<(Tensor<f32>, Tensor<f32>)>>,
    pub steps: u64,
}

impl AdamW {
    /// Applies one update to every id in `ids` that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Grads<f32>, ids: &[ParamId], cfg: &TrainConfig) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for &id in ids {
            let Some(g) = grads.param(id.0) else { continue };
            let p = store.get_mut(id);
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (Tensor::zeros(&p.shape), Tensor::zeros(&p.shape)));
            for i in 0..p.data.len() {
                let gi = g.data[i] as f64;
                let mi = b1 * m.data[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v.data[i] as f64 + (1.0 - b2) * gi * gi;
                m.data[i] = mi as f32;
                v.data[i] = vi as f32;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + cfg.adam_eps);
                let w = p.data[i] as f64;
                p.data[i] = (w - cfg.lr * (update + cfg.weight_decay * w)) as f32;
            }
        }
    }
}

/// A sample reduced to what training reads: the preprocessed image, the
/// slogans and the ground truth in canonical slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub stem: StemImage,
    pub slogans: Vec<String>,
    /// Ground-truth boxes in canonical order (logo, texts, underlay, embellishment).
    pub boxes: Vec<BBox>,
    pub classes: Vec<ElementClass>,
}

pub fn prepare_sample(s: &PosterSample, cfg: &ModelConfig) -> Result<PreparedSample> {
    s.validate(cfg.max_slogans)?;
    let mut els = s.gt.elements.clone();
    if els.len() > cfg.n_queries {
        return Err(Error::Record {
            id: s.id.clone(),
            msg: format!("{} elements exceed the {} query slots", els.len(), cfg.n_queries),
        });
    }
    els.sort_by_key(|e| e.cls.index());
    Ok(PreparedSample {
        id: s.id.clone(),
        stem: preprocess(&s.image, cfg)?,
        slogans: s.slogans.clone(),
        boxes: els.iter().map(|e| e.bbox).collect(),
        classes: els.iter().map(|e| e.cls).collect(),
    })
}

pub fn prepare_all(samples: &[PosterSample], cfg: &ModelConfig) -> Result<Vec<PreparedSample>> {
    samples.iter().map(|s| prepare_sample(s, cfg)).collect()
}

/// Index-aligned targets: ground truth followed by random background boxes.
pub fn padded_targets(
    s: &PreparedSample,
    n: usize,
    codec: &SignalCodec,
    rng: &mut ChaCha8Rng,
) -> (Vec<[f64; 4]>, Vec<ElementClass>) {
    let mut signal: Vec<[f64; 4]> = s.boxes.iter().map(|b| codec.encode(*b)).collect();
    let mut classes = s.classes.clone();
    while signal.len() < n {
        let b = BBox::new(
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.05..0.5),
            rng.random_range(0.05..0.5),
        )
        .clamp();
        signal.push(codec.encode(b));
        classes.push(ElementClass::Background);
    }
    (signal, classes)
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
    pub lr: f64,
}

/// Model, optimizer and randomness of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: RadmModel<f32>,
    pub cfg: TrainConfig,
    pub opt: AdamW,
    pub schedule: DiffusionSchedule,
    rng: ChaCha8Rng,
    pub step: usize,
}

#[derive(Debug, Serialize)]
struct BatchDump<'a> {
    step: usize,
    ids: Vec<&'a str>,
    timesteps: &'a [usize],
    noisy: &'a [Vec<[f64; 4]>],
    losses: &'a [LossBreakdown],
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = RadmModel::new(model_cfg, cfg.flags, cfg.seed)?;
        Self::from_model(model, cfg)
    }

    pub fn from_model(model: RadmModel<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.flags != cfg.flags {
            return Err(Error::Incompatible(format!(
                "model variant {} differs from training variant {}",
                model.flags.name(),
                cfg.flags.name()
            )));
        }
        let schedule = DiffusionSchedule::new(model.cfg.steps, model.cfg.schedule)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_646d);
        Ok(Self {
            model,
            cfg,
            opt: AdamW::default(),
            schedule,
            rng,
            step: 0,
        })
    }

    /// Builds the graph of the mean loss over `batch`; returns the tape, the
    /// root and per-sample diagnostics.
    fn batch_graph(&mut self, batch: &[&PreparedSample], fixed_t: Option<usize>) -> Result<(Tape<f32>, crate::autograd::Var, BatchState)> {
        let model = &self.model;
        let cfg = &model.cfg;
        let n = cfg.n_queries;
        let codec = SignalCodec::new(cfg.signal_scale);
        let mut tape = Tape::new();
        let mut state = BatchState::default();
        let mut parts = Vec::with_capacity(batch.len());
        for s in batch {
            let (x0, classes) = padded_targets(s, n, &codec, &mut self.rng);
            let t = fixed_t.unwrap_or_else(|| self.rng.random_range(1..=self.schedule.steps()));
            let eps: Vec<[f64; 4]> = (0..n)
                .map(|_| std::array::from_fn(|_| self.rng.sample(StandardNormal)))
                .collect();
            let x_t = self.schedule.q_sample(&x0, t, &eps)?;
            let pyr = model.image.forward(&mut tape, &model.store, &s.stem, cfg);
            let text = if model.flags.use_vtram {
                Some(model.text.forward(&mut tape, &model.store, &s.slogans, cfg)?)
            } else {
                None
            };
            let text_ref = text.as_ref().map(|(v, m)| (*v, m.as_slice()));
            let g = model.forward_slots(&mut tape, &pyr, text_ref, &x_t, t)?;
            let (total, parts_b) = training_loss(&mut tape, g.logits, g.boxes, &x0, &classes, &codec)?;
            parts.push((total, 1.0 / batch.len() as f64));
            state.timesteps.push(t);
            state.noisy.push(x_t);
            state.losses.push(parts_b);
        }
        let root = tape.weighted_sum(&parts);
        Ok((tape, root, state))
    }

    /// One optimizer update on `batch`; returns the pre-update mean loss.
    pub fn train_step(&mut self, batch: &[&PreparedSample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let (tape, root, state) = self.batch_graph(batch, None)?;
        let loss = LossBreakdown::mean(&state.losses);
        let grads = tape.backward(root);
        let ids = self.model.active_params();
        let grads_finite = ids
            .iter()
            .all(|id| grads.param(id.0).is_none_or(Tensor::all_finite));
        if !loss.is_finite() || !grads_finite {
            let dump = BatchDump {
                step: self.step,
                ids: batch.iter().map(|s| s.id.as_str()).collect(),
                timesteps: &state.timesteps,
                noisy: &state.noisy,
                losses: &state.losses,
            };
            return Err(Error::NonFinite {
                step: self.step,
                detail: serde_json::to_string(&dump).unwrap_or_else(|e| e.to_string()),
            });
        }
        self.opt.step(&mut self.model.store, &grads, &ids, &self.cfg);
        self.step += 1;
        Ok(loss)
    }

    /// Mean loss on `batch` with the trainer's randomness, without updating.
    pub fn eval_loss(&mut self, batch: &[&PreparedSample]) -> Result<LossBreakdown> {
        let (_, _, state) = self.batch_graph(batch, None)?;
        Ok(LossBreakdown::mean(&state.losses))
    }

    /// Mean loss on `batch` with every sample noised to step `t`.
    pub fn eval_loss_at(&mut self, batch: &[&PreparedSample], t: usize) -> Result<LossBreakdown> {
        if t == 0 || t > self.schedule.steps() {
            return Err(invalid(format!("step {t} outside 1..={}", self.schedule.steps())));
        }
        let (_, _, state) = self.batch_graph(batch, Some(t))?;
        Ok(LossBreakdown::mean(&state.losses))
    }

    /// Trains over `data` for the configured epochs (or `max_steps`), writing
    /// one JSON log record per step.
    pub fn fit(&mut self, data: &[PreparedSample], mut log: Option<&mut dyn Write>) -> Result<Vec<LogRecord>> {
        if data.is_empty() {
            return Err(invalid("no training samples"));
        }
        let mut records = Vec::new();
        let mut order: Vec<usize> = (0..data.len()).collect();
        'epochs: for _ in 0..self.cfg.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.cfg.batch_size) {
                if self.cfg.max_steps.is_some_and(|m| self.step >= m) {
                    break 'epochs;
                }
                let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &data[i]).collect();
                let step = self.step;
                let l = self.train_step(&batch)?;
                let rec = LogRecord {
                    step,
                    cls: l.cls,
                    l1: l.l1,
                    giou: l.giou,
                    total: l.total,
                    lr: self.cfg.lr,
                };
                if let Some(w) = log.as_deref_mut() {
                    writeln!(w, "{}", serde_json::to_string(&rec)?)?;
                }
                records.push(rec);
            }
        }
        Ok(records)
    }
}

#[derive(Debug, Default)]
struct BatchState {
    timesteps: Vec<usize>,
    noisy: Vec<Vec<[f64; 4]>>,
    losses: Vec<LossBreakdown>,
}
