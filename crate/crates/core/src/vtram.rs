//! Visual-textual relation module: every spatial position of a RoI feature,
//! augmented with a projection of the RoI's box, queries the slogan tokens.
//!
//! Per RoI `i` with features `V_i` (`[S, C]`, `S = Wr·Hr`) and box `G_i`:
//!
//! ```text
//! V_ip = [V_i | P_g(G_i)]                  (S × 2C)
//! Q    = P_q(V_ip), K = P_k(L), U = P_v(L)
//! M_i  = P_o(softmax(Q Kᵀ / √C) · U)       (S × C)
//! ```
//!
//! Padding slogan rows are excluded from the softmax; with no real slogan the
//! attention is empty and `M_i = 0` (`P_o` has no bias).

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{Linear, ParamId, ParamStore};
use crate::tensor::Scalar;
use crate::types::{BBox, ModelConfig};

#[derive(Debug, Clone, Copy)]
pub struct Vtram {
    pub pos: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl Vtram {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.roi_channels;
        let d = cfg.text_dim;
        Self {
            pos: Linear::new(store, "vtram.pos", 4, c, true, rng),
            query: Linear::new(store, "vtram.query", 2 * c, c, true, rng),
            key: Linear::new(store, "vtram.key", d, c, true, rng),
            value: Linear::new(store, "vtram.value", d, c, true, rng),
            out: Linear::new(store, "vtram.out", c, c, false, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.pos, self.query, self.key, self.value, self.out]
            .iter()
            .flat_map(Linear::params)
            .collect()
    }

    /// `rois`: `[N·S, C]` stacked RoI features; `text`: `[D_n, d]`.
    /// Returns `(M, attention)` with `M: [N·S, C]` and `attention: [N·S, D_n]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        rois: Var,
        boxes: &[BBox],
        text: Var,
        mask: &[bool],
        cfg: &ModelConfig,
    ) -> Result<(Var, Var)> {
        let s = cfg.roi_positions();
        let n = boxes.len();
        let c = cfg.roi_channels;
        if tape.shape(rois) != [n * s, c] {
            return Err(invalid(format!(
                "RoI stack {:?} does not match {n} boxes of [{s}, {c}]",
                tape.shape(rois)
            )));
        }
        if tape.shape(text) != [mask.len(), cfg.text_dim] {
            return Err(invalid(format!(
                "text features {:?} do not match mask length {}",
                tape.shape(text),
                mask.len()
            )));
        }
        let geo: Vec<f64> = boxes.iter().flat_map(|b| b.to_array()).collect();
        let geo = tape.constant(crate::tensor::Tensor::from_f64(&[n, 4], &geo));
        let pos = self.pos.forward(tape, store, geo);
        let pos = tape.repeat_rows(pos, s);
        let vip = tape.concat_cols(&[rois, pos]);
        let q = self.query.forward(tape, store, vip);
        let k = self.key.forward(tape, store, text);
        let u = self.value.forward(tape, store, text);
        let logits = tape.matmul_t(q, false, k, true);
        let logits = tape.scale(logits, 1.0 / (c as f64).sqrt());
        let attn = tape.softmax_rows(logits, Some(mask));
        let mixed = tape.matmul(attn, u);
        Ok((self.out.forward(tape, store, mixed), attn))
    }
}
