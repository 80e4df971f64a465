//! Fusion of relation features with the RoI features and the shared
//! per-slot prediction head.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{Linear, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::types::ModelConfig;

/// `[sin(t·f_0) … sin(t·f_{h−1}), cos(t·f_0) … cos(t·f_{h−1})]` with
/// `f_k = 10000^(−k/h)` and `h = dim/2`.
pub fn timestep_embedding(step: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let t = step as f64;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp())
        .collect();
    freqs
        .iter()
        .map(|f| (t * f).sin())
        .chain(freqs.iter().map(|f| (t * f).cos()))
        .collect()
}

/// Frequencies per coordinate in [`box_embedding`].
pub const BOX_FREQS: usize = 8;

/// Per coordinate `c` of each signal box, `sin(c·f_k)` and `cos(c·f_k)` with
/// `f_k = 2^k·π/4`; one row of `8·BOX_FREQS` values per box.
pub fn box_embedding(x: &[[f64; 4]]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * 8 * BOX_FREQS);
    for b in x {
        for c in b {
            for k in 0..BOX_FREQS {
                let a = c * std::f64::consts::FRAC_PI_4 * (1u32 << k) as f64;
                out.push(a.sin());
                out.push(a.cos());
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub time: Linear,
    pub noisy: Linear,
    pub hidden: Vec<Linear>,
    pub cls: Linear,
    pub bbox: Linear,
}

impl Decoder {
    pub const HIDDEN_LAYERS: usize = 2;

    pub fn new<F: Scalar>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d_in = cfg.decoder_in();
        let h = cfg.hidden_dim;
        let time = Linear::new(store, "decoder.time", cfg.time_embed_dim, d_in, true, rng);
        let noisy = Linear::new(store, "decoder.noisy", 8 * BOX_FREQS, d_in, false, rng);
        let hidden = (0..Self::HIDDEN_LAYERS)
            .map(|l| {
                let fan_in = if l == 0 { d_in } else { h };
                Linear::new(store, &format!("decoder.mlp{l}"), fan_in, h, true, rng)
            })
            .collect();
        let cls = Linear::new(store, "decoder.cls", h, cfg.num_classes, true, rng);
        let bbox = Linear::new(store, "decoder.box", h, 4, true, rng);
        Self {
            time,
            noisy,
            hidden,
            cls,
            bbox,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.time, &self.noisy]
            .into_iter()
            .chain(&self.hidden)
            .chain([&self.cls, &self.bbox])
            .flat_map(Linear::params)
            .collect()
    }

    /// `m`, `v`: `[N, C·Wr·Hr]`; `t`: `[N, d_t]`; `query`: optional per-slot
    /// embedding `[N, decoder_in]`; `x_t`: the `N` noisy signal boxes. Returns
    /// `(logits: [N, num_classes], x0_hat: [N, 4])`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        m: Var,
        t: Var,
        v: Var,
        query: Option<Var>,
        x_t: &[[f64; 4]],
        step: usize,
        cfg: &ModelConfig,
    ) -> Result<(Var, Var)> {
        let n = tape.shape(v).first().copied().unwrap_or(0);
        let flat = cfg.roi_flat();
        if tape.shape(m) != [n, flat] || tape.shape(v) != [n, flat] || tape.shape(t) != [n, cfg.geo_feat_dim] {
            return Err(invalid(format!(
                "decoder inputs disagree: M {:?}, T {:?}, V {:?}",
                tape.shape(m),
                tape.shape(t),
                tape.shape(v)
            )));
        }
        if let Some(q) = query {
            if tape.shape(q) != [n, cfg.decoder_in()] {
                return Err(invalid(format!("query embedding has shape {:?}, expected [{n}, {}]", tape.shape(q), cfg.decoder_in())));
            }
        }
        if x_t.len() != n {
            return Err(invalid(format!("decoder got {} noisy boxes for {n} slots", x_t.len())));
        }
        let fused = tape.concat_cols(&[m, t, v]);
        let temb = tape.constant(Tensor::from_f64(
            &[1, cfg.time_embed_dim],
            &timestep_embedding(step, cfg.time_embed_dim),
        ));
        let temb = self.time.forward(tape, store, temb);
        let fused = tape.add_row(fused, temb);
        let bemb = tape.constant(Tensor::from_f64(&[n, 8 * BOX_FREQS], &box_embedding(x_t)));
        let bemb = self.noisy.forward(tape, store, bemb);
        let mut x = tape.add(fused, bemb);
        if let Some(q) = query {
            x = tape.add(x, q);
        }
        for layer in &self.hidden {
            let y = layer.forward(tape, store, x);
            x = tape.silu(y);
        }
        let logits = self.cls.forward(tape, store, x);
        let boxes = self.bbox.forward(tape, store, x);
        Ok((logits, boxes))
    }
}
