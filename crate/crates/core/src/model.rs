//! The complete denoiser: encoders, both relation modules and the decoder,
//! with switches that remove either relation module's contribution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::decoder::Decoder;
use crate::diffusion::{DenoiseOutput, Denoiser, SignalCodec};
use crate::encoders::{FeaturePyramid, ImageEncoder, TapePyramid, TextEncoder, TextFeatures};
use crate::error::{invalid, Result};
use crate::gram::Gram;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::types::{BBox, ModelConfig, RgbRaster};
use crate::vtram::Vtram;

/// Which relation modules contribute to the decoder input. A disabled module
/// is replaced by zeros of the same width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModuleFlags {
    pub use_vtram: bool,
    pub use_gram: bool,
}

impl Default for ModuleFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl ModuleFlags {
    pub const FULL: Self = Self {
        use_vtram: true,
        use_gram: true,
    };
    pub const NO_VTRAM: Self = Self {
        use_vtram: false,
        use_gram: true,
    };
    pub const NO_GRAM: Self = Self {
        use_vtram: true,
        use_gram: false,
    };

    pub fn name(self) -> &'static str {
        match (self.use_vtram, self.use_gram) {
            (true, true) => "full",
            (false, true) => "no-vtram",
            (true, false) => "no-gram",
            (false, false) => "no-relations",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::FULL),
            "no-vtram" => Ok(Self::NO_VTRAM),
            "no-gram" => Ok(Self::NO_GRAM),
            "no-relations" => Ok(Self {
                use_vtram: false,
                use_gram: false,
            }),
            other => Err(invalid(format!("unknown variant {other:?}"))),
        }
    }
}

/// Graph handles of one forward pass over a sample's `N` slots.
#[derive(Debug, Clone, Copy)]
pub struct SlotGraph {
    pub logits: Var,
    pub boxes: Var,
    pub vtram: Option<Var>,
    pub gram_weights: Option<Var>,
}

/// Conditioning computed once per request.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelContext<F> {
    pub pyramid: FeaturePyramid<F>,
    pub text: TextFeatures<F>,
}

#[derive(Debug, Clone)]
pub struct RadmModel<F: Scalar> {
    pub cfg: ModelConfig,
    pub flags: ModuleFlags,
    pub store: ParamStore<F>,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub vtram: Vtram,
    pub gram: Gram,
    pub decoder: Decoder,
    /// Learned embedding of each query slot, `[N, decoder_in]`.
    pub query: ParamId,
}

impl<F: Scalar> RadmModel<F> {
    pub fn new(cfg: ModelConfig, flags: ModuleFlags, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.roi_channels <= ImageEncoder::COORD_CHANNELS {
            return Err(invalid(format!(
                "roi_channels must exceed the {} coordinate channels",
                ImageEncoder::COORD_CHANNELS
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let image = ImageEncoder::new(&mut store, &cfg, &mut rng);
        let text = TextEncoder::new(&mut store, &cfg, &mut rng);
        let vtram = Vtram::new(&mut store, &cfg, &mut rng);
        let gram = Gram::new(&mut store, &cfg, &mut rng);
        let decoder = Decoder::new(&mut store, &cfg, &mut rng);
        let query = store.add_uniform("query", &[cfg.n_queries, cfg.decoder_in()], cfg.decoder_in(), &mut rng);
        Ok(Self {
            cfg,
            flags,
            store,
            image,
            text,
            vtram,
            gram,
            decoder,
            query,
        })
    }

    /// Parameters that the active variant reads, and therefore trains.
    pub fn active_params(&self) -> Vec<ParamId> {
        let mut ids = self.image.params();
        if self.flags.use_vtram {
            ids.extend(self.text.params());
            ids.extend(self.vtram.params());
        }
        if self.flags.use_gram {
            ids.extend(self.gram.params());
        }
        ids.extend(self.decoder.params());
        ids.push(self.query);
        ids
    }

    pub fn cast<G: Scalar>(&self) -> RadmModel<G> {
        RadmModel {
            cfg: self.cfg.clone(),
            flags: self.flags,
            store: self.store.cast(),
            image: self.image.clone(),
            text: self.text,
            vtram: self.vtram,
            gram: self.gram,
            decoder: self.decoder.clone(),
            query: self.query,
        }
    }

    /// Runs VTRAM, GRAM and the decoder for noisy signals `x_t` at `step`.
    /// `text` is required when VTRAM is enabled.
    pub fn forward_slots(
        &self,
        tape: &mut Tape<F>,
        pyramid: &TapePyramid,
        text: Option<(Var, &[bool])>,
        x_t: &[[f64; 4]],
        step: usize,
    ) -> Result<SlotGraph> {
        let cfg = &self.cfg;
        let n = cfg.n_queries;
        if x_t.len() != n {
            return Err(invalid(format!("expected {n} noisy boxes, got {}", x_t.len())));
        }
        let codec = SignalCodec::new(cfg.signal_scale);
        let boxes: Vec<BBox> = x_t.iter().map(|s| codec.decode_valid(*s)).collect();
        let rois = boxes
            .iter()
            .map(|b| pyramid.roi_pool(tape, *b, cfg))
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat_rows(&rois);
        let flat = tape.reshape(stacked, &[n, cfg.roi_flat()]);

        let (m, vtram) = if self.flags.use_vtram {
            let (tv, mask) = text.ok_or_else(|| invalid("VTRAM is enabled but no text features were given"))?;
            let (m, _) = self.vtram.forward(tape, &self.store, stacked, &boxes, tv, mask, cfg)?;
            (tape.reshape(m, &[n, cfg.roi_flat()]), Some(m))
        } else {
            (tape.constant(Tensor::zeros(&[n, cfg.roi_flat()])), None)
        };
        let (t, gram_weights) = if self.flags.use_gram {
            let (t, w) = self.gram.forward(tape, &self.store, flat, &boxes, cfg)?;
            (t, Some(w))
        } else {
            (tape.constant(Tensor::zeros(&[n, cfg.geo_feat_dim])), None)
        };
        let query = self.store.var(tape, self.query);
        let (logits, boxes) = self.decoder.forward(tape, &self.store, m, t, flat, Some(query), x_t, step, cfg)?;
        Ok(SlotGraph {
            logits,
            boxes,
            vtram,
            gram_weights,
        })
    }

    /// Builds a request context from externally supplied image features.
    pub fn context_from_pyramid(&self, pyramid: FeaturePyramid<F>, slogans: &[String]) -> Result<ModelContext<F>> {
        pyramid.validate()?;
        if pyramid.channels() != self.cfg.roi_channels {
            return Err(invalid(format!(
                "feature pyramid has {} channels, model expects {}",
                pyramid.channels(),
                self.cfg.roi_channels
            )));
        }
        let text = self.text.encode(&self.store, slogans, &self.cfg)?;
        Ok(ModelContext { pyramid, text })
    }
}

impl<F: Scalar> Denoiser for RadmModel<F> {
    type Context = ModelContext<F>;

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn prepare(&self, image: &RgbRaster, slogans: &[String]) -> Result<ModelContext<F>> {
        let pyramid = self.image.encode(&self.store, image, &self.cfg)?;
        let text = self.text.encode(&self.store, slogans, &self.cfg)?;
        Ok(ModelContext { pyramid, text })
    }

    fn denoise(&self, ctx: &ModelContext<F>, x_t: &[[f64; 4]], step: usize) -> Result<DenoiseOutput> {
        let mut tape = Tape::new();
        let pyr = ctx.pyramid.to_tape(&mut tape);
        let text = tape.constant(ctx.text.matrix.clone());
        let g = self.forward_slots(&mut tape, &pyr, Some((text, &ctx.text.mask)), x_t, step)?;
        let k = self.cfg.num_classes;
        let logits = tape.value(g.logits).to_f64();
        let boxes = tape.value(g.boxes).to_f64();
        Ok(DenoiseOutput {
            class_logits: logits.chunks_exact(k).map(<[f64]>::to_vec).collect(),
            x0_hat: boxes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
        })
    }
}
