//! Geometry relation module.
//!
//! Pairwise relative geometry between the `N` query boxes is encoded as
//!
//! ```text
//! R_ij = [log(max(|x_i − x_j|, ε)/w_j), log(max(|y_i − y_j|, ε)/h_j),
//!         log(w_i/w_j), log(h_i/h_j)]
//! ```
//!
//! expanded with a sin/cos encoding, projected to one logit per pair and
//! normalized row-wise into relation weights `W`. The geometry features are
//! `T = W · P(flatten(V))`.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{Linear, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::types::{BBox, ModelConfig};

/// `N × N` relative position features, row-major over `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoRelation {
    pub n: usize,
    pub data: Vec<[f64; 4]>,
}

impl GeoRelation {
    pub fn get(&self, i: usize, j: usize) -> [f64; 4] {
        self.data[i * self.n + j]
    }
}

pub fn relative_geometry(boxes: &[BBox], eps_geo: f64) -> GeoRelation {
    let n = boxes.len();
    let mut data = Vec::with_capacity(n * n);
    for bi in boxes {
        for bj in boxes {
            data.push([
                ((bi.cx - bj.cx).abs().max(eps_geo) / bj.w).ln(),
                ((bi.cy - bj.cy).abs().max(eps_geo) / bj.h).ln(),
                (bi.w / bj.w).ln(),
                (bi.h / bj.h).ln(),
            ]);
        }
    }
    GeoRelation { n, data }
}

/// Expands every component into `d_h/4` values:
/// `sin(pos / 10000^(8k/d_h))`, `cos(…)` for `k = 0 … d_h/8 − 1`.
pub fn sincos_embed(rel: &GeoRelation, d_h: usize) -> Result<Tensor<f64>> {
    if d_h == 0 || d_h % 8 != 0 {
        return Err(invalid(format!("geometry embedding width {d_h} must be a positive multiple of 8")));
    }
    let pairs = d_h / 8;
    let freqs: Vec<f64> = (0..pairs)
        .map(|k| 10000f64.powf(-(8.0 * k as f64) / d_h as f64))
        .collect();
    let mut data = Vec::with_capacity(rel.data.len() * d_h);
    for r in &rel.data {
        for pos in r {
            for f in &freqs {
                let a = pos * f;
                data.push(a.sin());
                data.push(a.cos());
            }
        }
    }
    Ok(Tensor::new(vec![rel.data.len(), d_h], data))
}

/// Row-wise softmax of an `N × N` logit matrix.
pub fn geo_weights(logits: &[f64], n: usize) -> Vec<f64> {
    let mut w = logits.to_vec();
    for row in w.chunks_exact_mut(n) {
        crate::autograd::softmax_masked(row, None);
    }
    w
}

#[derive(Debug, Clone, Copy)]
pub struct Gram {
    /// Pair embedding → scalar relation logit.
    pub logit: Linear,
    /// Flattened RoI feature → `d_t`.
    pub proj: Linear,
}

impl Gram {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            logit: Linear::new(store, "gram.logit", cfg.geo_embed_dim, 1, false, rng),
            proj: Linear::new(store, "gram.proj", cfg.roi_flat(), cfg.geo_feat_dim, true, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.logit.params().into_iter().chain(self.proj.params()).collect()
    }

    /// `rois`: `[N, C·Wr·Hr]`. Returns `(T: [N, d_t], W: [N, N])`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        rois: Var,
        boxes: &[BBox],
        cfg: &ModelConfig,
    ) -> Result<(Var, Var)> {
        let n = boxes.len();
        if tape.shape(rois) != [n, cfg.roi_flat()] {
            return Err(invalid(format!(
                "flattened RoIs {:?} do not match [{n}, {}]",
                tape.shape(rois),
                cfg.roi_flat()
            )));
        }
        let emb = sincos_embed(&relative_geometry(boxes, cfg.eps_geo), cfg.geo_embed_dim)?;
        let emb = tape.constant(emb.cast());
        let logits = self.logit.forward(tape, store, emb);
        let logits = tape.reshape(logits, &[n, n]);
        let w = tape.softmax_rows(logits, None);
        let p = self.proj.forward(tape, store, rois);
        Ok((tape.matmul(w, p), w))
    }
}
