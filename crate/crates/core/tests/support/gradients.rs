//! Finite-difference checks of every trainable module and loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use radm_core::autograd::{Tape, Var};
use radm_core::decoder::Decoder;
use radm_core::diffusion::SignalCodec;
use radm_core::experiments::{overfit_model_config, overfit_synth, overfit_train_config};
use radm_core::gradcheck::{check, GradCheck};
use radm_core::gram::Gram;
use radm_core::loss::{focal_loss, giou_signal_loss, l1_loss, training_loss, FOCAL_ALPHA, FOCAL_GAMMA};
use radm_core::model::{ModuleFlags, RadmModel};
use radm_core::nn::{ParamId, ParamStore};
use radm_core::synth::generate;
use radm_core::tensor::Tensor;
use radm_core::training::{prepare_all, Trainer};
use radm_core::vtram::Vtram;
use radm_core::{BBox, ElementClass, ModelConfig};

pub const PROBES: usize = 24;
pub const STEP: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            BBox::new(
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
            )
        })
        .collect()
}

/// Scalar readout `Σ w ⊙ x` with fixed random weights.
fn readout(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let len = tape.value(x).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    tape.dot(x, w)
}

fn small_config() -> ModelConfig {
    ModelConfig {
        n_queries: 4,
        max_slogans: 3,
        text_dim: 8,
        roi_channels: 6,
        roi_w: 2,
        roi_h: 2,
        geo_embed_dim: 16,
        geo_feat_dim: 8,
        hidden_dim: 16,
        time_embed_dim: 8,
        ..ModelConfig::tiny()
    }
}

pub fn vtram_check() -> GradCheck {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::default();
    let vt = Vtram::new(&mut store, &cfg, &mut rng);
    let n = cfg.n_queries;
    let rois = uniform(&mut rng, &[n * cfg.roi_positions(), cfg.roi_channels], -1.0, 1.0);
    let text = uniform(&mut rng, &[cfg.max_slogans, cfg.text_dim], -1.0, 1.0);
    let mask = [true, true, false];
    let boxes = random_boxes(&mut rng, n);
    check(&mut store, &vt.params(), PROBES, STEP, 1, |tape, store| {
        let r = tape.constant(rois.clone());
        let t = tape.constant(text.clone());
        let (m, _) = vt.forward(tape, store, r, &boxes, t, &mask, &cfg).unwrap();
        readout(tape, m, 2)
    })
}

pub fn gram_check() -> GradCheck {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::default();
    let g = Gram::new(&mut store, &cfg, &mut rng);
    let n = cfg.n_queries;
    let rois = uniform(&mut rng, &[n, cfg.roi_flat()], -1.0, 1.0);
    let boxes = random_boxes(&mut rng, n);
    check(&mut store, &g.params(), PROBES, STEP, 3, |tape, store| {
        let r = tape.constant(rois.clone());
        let (t, _) = g.forward(tape, store, r, &boxes, &cfg).unwrap();
        readout(tape, t, 4)
    })
}

pub fn decoder_check() -> GradCheck {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::default();
    let dec = Decoder::new(&mut store, &cfg, &mut rng);
    let n = cfg.n_queries;
    let m = uniform(&mut rng, &[n, cfg.roi_flat()], -1.0, 1.0);
    let t = uniform(&mut rng, &[n, cfg.geo_feat_dim], -1.0, 1.0);
    let v = uniform(&mut rng, &[n, cfg.roi_flat()], -1.0, 1.0);
    let q = uniform(&mut rng, &[n, cfg.decoder_in()], -0.5, 0.5);
    let x_t: Vec<[f64; 4]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect();
    check(&mut store, &dec.params(), PROBES, STEP, 5, |tape, store| {
        let (m, t, v, q) = (
            tape.constant(m.clone()),
            tape.constant(t.clone()),
            tape.constant(v.clone()),
            tape.constant(q.clone()),
        );
        let (logits, boxes) = dec.forward(tape, store, m, t, v, Some(q), &x_t, 417, &cfg).unwrap();
        let a = readout(tape, logits, 6);
        let b = readout(tape, boxes, 7);
        tape.weighted_sum(&[(a, 1.0), (b, 1.0)])
    })
}

/// Predictions and targets for the loss checks, in signal space.
struct LossCase {
    store: ParamStore<f64>,
    logits: ParamId,
    boxes: ParamId,
    gt: Vec<[f64; 4]>,
    classes: Vec<ElementClass>,
    codec: SignalCodec,
}

fn loss_case(seed: u64) -> LossCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codec = SignalCodec::new(2.0);
    let n = 6;
    let k = ElementClass::ALL.len();
    let classes = vec![
        ElementClass::Logo,
        ElementClass::Text,
        ElementClass::Text,
        ElementClass::Underlay,
        ElementClass::Background,
        ElementClass::Embellishment,
    ];
    let gt: Vec<[f64; 4]> = random_boxes(&mut rng, n).into_iter().map(|b| codec.encode(b)).collect();
    // Offsets keep predictions inside the valid box range and away from the
    // kinks of |·| at the targets.
    let pred: Vec<f64> = gt
        .iter()
        .flat_map(|g| g.map(|v| v + rng.random_range(0.05..0.3) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }))
        .collect();
    let mut store = ParamStore::default();
    let logits = store.add("logits", uniform(&mut rng, &[n, k], -2.0, 2.0));
    let boxes = store.add("boxes", Tensor::new(vec![n, 4], pred));
    LossCase {
        store,
        logits,
        boxes,
        gt,
        classes,
        codec,
    }
}

fn rows(t: &Tensor<f64>) -> Vec<[f64; 4]> {
    t.data.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect()
}

fn mask(classes: &[ElementClass]) -> Vec<bool> {
    classes.iter().map(|c| *c != ElementClass::Background).collect()
}

pub fn focal_check() -> GradCheck {
    let mut c = loss_case(21);
    let targets: Vec<usize> = c.classes.iter().map(|c| c.index()).collect();
    let k = ElementClass::ALL.len();
    let ids = [c.logits];
    check(&mut c.store, &ids, PROBES, STEP, 8, |tape, store| {
        let z = store.var(tape, ids[0]);
        let (l, g) = focal_loss(&tape.value(z).data, &targets, k, FOCAL_ALPHA, FOCAL_GAMMA);
        tape.fused_scalar(z, l, g)
    })
}

pub fn l1_check() -> GradCheck {
    let mut c = loss_case(22);
    let (gt, m, ids) = (c.gt.clone(), mask(&c.classes), [c.boxes]);
    check(&mut c.store, &ids, PROBES, STEP, 9, |tape, store| {
        let b = store.var(tape, ids[0]);
        let (l, g) = l1_loss(&rows(tape.value(b)), &gt, &m);
        tape.fused_scalar(b, l, g.into_iter().flatten().collect())
    })
}

pub fn giou_check() -> GradCheck {
    let mut c = loss_case(23);
    let (gt, m, ids, codec) = (c.gt.clone(), mask(&c.classes), [c.boxes], c.codec);
    check(&mut c.store, &ids, PROBES, STEP, 10, |tape, store| {
        let b = store.var(tape, ids[0]);
        let (l, g) = giou_signal_loss(&codec, &rows(tape.value(b)), &gt, &m);
        tape.fused_scalar(b, l, g.into_iter().flatten().collect())
    })
}

pub fn total_loss_check() -> GradCheck {
    let mut c = loss_case(24);
    let (gt, classes, codec, ids) = (c.gt.clone(), c.classes.clone(), c.codec, [c.logits, c.boxes]);
    check(&mut c.store, &ids, PROBES, STEP, 11, |tape, store| {
        let z = store.var(tape, ids[0]);
        let b = store.var(tape, ids[1]);
        training_loss(tape, z, b, &gt, &classes, &codec).unwrap().0
    })
}

/// Loss of the whole model on one synthetic poster, through every encoder.
pub fn model_check() -> GradCheck {
    let cfg = small_config();
    let spec = radm_core::synth::SynthSpec {
        count: 1,
        canvas: (32, 48),
        ..overfit_synth()
    };
    let sample = &prepare_all(&generate(&spec).unwrap(), &cfg).unwrap()[0];
    let base = RadmModel::<f64>::new(cfg.clone(), ModuleFlags::FULL, 4).unwrap();
    let codec = SignalCodec::new(cfg.signal_scale);
    let n = cfg.n_queries;
    let mut gt: Vec<[f64; 4]> = sample.boxes.iter().map(|b| codec.encode(*b)).collect();
    let mut classes = sample.classes.clone();
    gt.resize(n, codec.encode(BBox::new(0.5, 0.5, 0.2, 0.2)));
    classes.resize(n, ElementClass::Background);
    gt.truncate(n);
    classes.truncate(n);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x_t: Vec<[f64; 4]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.5..1.5))).collect();
    let ids = base.active_params();
    let mut store = base.store.clone();
    check(&mut store, &ids, PROBES.max(ids.len()), STEP, 12, |tape, store| {
        let mut model = base.clone();
        model.store = store.clone();
        let pyr = model.image.forward(tape, &model.store, &sample.stem, &cfg);
        let (text, mask) = model.text.forward(tape, &model.store, &sample.slogans, &cfg).unwrap();
        let g = model.forward_slots(tape, &pyr, Some((text, &mask)), &x_t, 300).unwrap();
        training_loss(tape, g.logits, g.boxes, &gt, &classes, &codec).unwrap().0
    })
}

pub fn all_checks() -> Vec<(&'static str, GradCheck)> {
    vec![
        ("vtram", vtram_check()),
        ("gram", gram_check()),
        ("decoder", decoder_check()),
        ("focal", focal_check()),
        ("l1", l1_check()),
        ("giou", giou_check()),
        ("total loss", total_loss_check()),
        ("full model", model_check()),
    ]
}

/// Loss on a fixed batch before and after one optimizer step at the base
/// learning rate, with identical noise draws.
pub fn descent_step_lowers_loss() -> (f64, f64) {
    let spec = radm_core::synth::SynthSpec { count: 4, ..overfit_synth() };
    let cfg = overfit_model_config();
    let data = prepare_all(&generate(&spec).unwrap(), &cfg).unwrap();
    let batch: Vec<_> = data.iter().collect();
    let mut train = overfit_train_config(ModuleFlags::FULL, 0);
    train.lr = 2.5e-5;
    let origin = Trainer::new(cfg, train).unwrap();
    let mut stepped = origin.clone();
    let before = stepped.train_step(&batch).unwrap().total;
    let mut replay = origin.clone();
    replay.model = stepped.model.clone();
    let after = replay.eval_loss(&batch).unwrap().total;
    (before, after)
}
