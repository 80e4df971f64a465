//! Randomized checks of the relation modules' structural invariants.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use radm_core::autograd::Tape;
use radm_core::gram::{geo_weights, relative_geometry, Gram};
use radm_core::nn::ParamStore;
use radm_core::tensor::Tensor;
use radm_core::vtram::Vtram;
use radm_core::{BBox, ModelConfig};

const EPS_GEO: f64 = 1e-3;

/// A multiple of 2⁻¹⁰ in `[lo, hi)`; sums, differences and power-of-two
/// scalings of such values are exact in binary floating point.
fn dyadic(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let (a, b) = ((lo * 1024.0).ceil() as i64, (hi * 1024.0).floor() as i64);
    rng.random_range(a..b) as f64 / 1024.0
}

fn dyadic_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BBox> {
    (0..n)
        .map(|_| BBox::new(dyadic(rng, 0.1, 0.9), dyadic(rng, 0.1, 0.9), dyadic(rng, 0.01, 0.4), dyadic(rng, 0.01, 0.4)))
        .collect()
}

fn clamp_binds(boxes: &[BBox], eps: f64) -> bool {
    boxes.iter().any(|a| {
        boxes
            .iter()
            .any(|b| !std::ptr::eq(a, b) && ((a.cx - b.cx).abs() < eps || (a.cy - b.cy).abs() < eps))
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GramInvariants {
    pub translation_exact: bool,
    pub scale_exact: bool,
    pub scale_instances: usize,
    pub row_sum_err: f64,
    pub min_weight: f64,
}

/// Translation and power-of-two scale invariance of the relative geometry,
/// and row-stochastic relation weights of a random GRAM, over `instances`
/// layouts with up to 16 boxes.
pub fn gram_invariants(instances: usize, seed: u64) -> GramInvariants {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GramInvariants {
        translation_exact: true,
        scale_exact: true,
        min_weight: f64::INFINITY,
        ..Default::default()
    };
    let cfg = ModelConfig {
        roi_channels: 2,
        roi_w: 1,
        roi_h: 1,
        geo_embed_dim: 16,
        geo_feat_dim: 4,
        ..ModelConfig::tiny()
    };
    for _ in 0..instances {
        let n = rng.random_range(1..=16);
        let boxes = dyadic_boxes(&mut rng, n);
        let base = relative_geometry(&boxes, EPS_GEO);

        let (dx, dy) = (dyadic(&mut rng, -2.0, 2.0), dyadic(&mut rng, -2.0, 2.0));
        let moved: Vec<BBox> = boxes.iter().map(|b| BBox::new(b.cx + dx, b.cy + dy, b.w, b.h)).collect();
        out.translation_exact &= relative_geometry(&moved, EPS_GEO) == base;

        let s = [0.25, 0.5, 2.0, 4.0, 8.0][rng.random_range(0..5)];
        if !clamp_binds(&boxes, EPS_GEO / s) && !clamp_binds(&boxes, EPS_GEO) {
            let scaled: Vec<BBox> = boxes.iter().map(|b| BBox::new(b.cx * s, b.cy * s, b.w * s, b.h * s)).collect();
            let r = relative_geometry(&scaled, EPS_GEO);
            // Self-pair offsets always sit on the clamp; their ratio terms do not.
            out.scale_exact &= (0..n).all(|i| {
                (0..n).all(|j| {
                    let (a, b) = (r.get(i, j), base.get(i, j));
                    if i == j { a[2..] == b[2..] } else { a == b }
                })
            });
            out.scale_instances += 1;
        }

        let mut store = ParamStore::<f64>::default();
        let g = Gram::new(&mut store, &cfg, &mut rng);
        for v in &mut store.get_mut(g.logit.w).data {
            *v *= rng.random_range(1.0..40.0);
        }
        let mut tape = Tape::new();
        let rois = tape.constant(Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()));
        let (_, w) = g.forward(&mut tape, &store, rois, &boxes, &cfg).unwrap();
        let w = &tape.value(w).data;
        for row in w.chunks_exact(n) {
            out.row_sum_err = out.row_sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            out.min_weight = row.iter().copied().fold(out.min_weight, f64::min);
        }
        let logits: Vec<f64> = (0..n * n).map(|_| rng.random_range(-300.0..300.0)).collect();
        for row in geo_weights(&logits, n).chunks_exact(n) {
            out.row_sum_err = out.row_sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            out.min_weight = row.iter().copied().fold(out.min_weight, f64::min);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VtramInvariants {
    pub permutation_err: f64,
    pub padding_err: f64,
    pub all_masked_zero: bool,
}

/// Slogan-permutation and padding-extension invariance of VTRAM and exact
/// zeros with no real slogan, over `instances` random modules and inputs.
pub fn vtram_invariants(instances: usize, seed: u64) -> VtramInvariants {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = VtramInvariants {
        all_masked_zero: true,
        ..Default::default()
    };
    for _ in 0..instances {
        let cfg = ModelConfig {
            roi_channels: rng.random_range(2..=8),
            roi_w: rng.random_range(1..=3),
            roi_h: rng.random_range(1..=3),
            text_dim: 4 * rng.random_range(1..=4),
            ..ModelConfig::tiny()
        };
        let mut store = ParamStore::<f64>::default();
        let vt = Vtram::new(&mut store, &cfg, &mut rng);
        let n = rng.random_range(1..=6);
        let s = cfg.roi_positions();
        let rois = Tensor::new(
            vec![n * s, cfg.roi_channels],
            (0..n * s * cfg.roi_channels).map(|_| rng.random_range(-2.0..2.0)).collect(),
        );
        let boxes: Vec<BBox> = (0..n)
            .map(|_| BBox::new(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.02..0.5), rng.random_range(0.02..0.5)))
            .collect();
        let real = rng.random_range(1..=5);
        let pad = rng.random_range(0..=3);
        let row = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..cfg.text_dim).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let rows: Vec<Vec<f64>> = (0..real + pad).map(|_| row(&mut rng)).collect();
        let mask: Vec<bool> = (0..real + pad).map(|i| i < real).collect();

        let run = |rows: &[Vec<f64>], mask: &[bool]| -> Vec<f64> {
            let mut tape = Tape::new();
            let r = tape.constant(rois.clone());
            let t = tape.constant(Tensor::new(vec![rows.len(), cfg.text_dim], rows.concat()));
            let (m, _) = vt.forward(&mut tape, &store, r, &boxes, t, mask, &cfg).unwrap();
            tape.value(m).data.clone()
        };
        let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let base = run(&rows, &mask);

        let mut perm: Vec<usize> = (0..real).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).chain(rows[real..].iter().cloned()).collect();
        out.permutation_err = out.permutation_err.max(max_diff(&base, &run(&permuted, &mask)));

        let extra = rng.random_range(1..=4);
        let mut longer = rows.clone();
        let mut longer_mask = mask.clone();
        for _ in 0..extra {
            longer.push(row(&mut rng).iter().map(|v| v * 100.0).collect());
            longer_mask.push(false);
        }
        out.padding_err = out.padding_err.max(max_diff(&base, &run(&longer, &longer_mask)));

        let none = vec![false; rows.len()];
        out.all_masked_zero &= run(&rows, &none).iter().all(|v| *v == 0.0);
    }
    out
}
