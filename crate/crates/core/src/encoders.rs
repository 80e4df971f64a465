//! Image and text encoders.
//!
//! The image side is a small strided convolutional network producing a
//! feature pyramid; boxes read fixed-size RoI features from it by bilinear
//! sampling. Each level carries two fixed coordinate channels (normalized x
//! and y of the cell center) next to the learned ones, plus a learned global
//! context vector broadcast over every cell.
//!
//! The text side hashes slogan tokens into a learned embedding table and
//! appends a sinusoidal encoding of the slogan's character count.

use std::path::Path;

use image::imageops::FilterType;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvGeometry, SamplePlan, Tape, Var};
use crate::container;
use crate::error::{invalid, Error, Result};
use crate::nn::{Linear, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::types::{BBox, ModelConfig, RgbRaster};

/// Bilinear samples per RoI bin along each axis.
pub const SAMPLING_RATIO: usize = 2;

/// Image after resizing to the encoder resolution and fixed average pooling:
/// `[3, h·w]` in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StemImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

pub fn preprocess(image: &RgbRaster, cfg: &ModelConfig) -> Result<StemImage> {
    if image.is_empty() {
        return Err(invalid("empty image"));
    }
    let (tw, th) = cfg.image_size;
    let buf = image::RgbImage::from_raw(image.width, image.height, image.data.clone())
        .ok_or_else(|| invalid("raster buffer does not match its dimensions"))?;
    let resized = if (image.width, image.height) == (tw, th) {
        buf
    } else {
        image::imageops::resize(&buf, tw, th, FilterType::Triangle)
    };
    let p = cfg.stem_pool as usize;
    let (h, w) = (th as usize / p, tw as usize / p);
    let mut data = vec![0.0; 3 * h * w];
    let inv = 1.0 / (p * p) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for dy in 0..p {
                for dx in 0..p {
                    let px = resized.get_pixel((x * p + dx) as u32, (y * p + dy) as u32);
                    for c in 0..3 {
                        acc[c] += px.0[c] as f64;
                    }
                }
            }
            for c in 0..3 {
                data[c * h * w + y * w + x] = acc[c] * inv / 127.5 - 1.0;
            }
        }
    }
    Ok(StemImage { h, w, data })
}

/// One pyramid level: `[C, h·w]` features at the given stride (in encoder
/// input pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel<F> {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub data: Tensor<F>,
}

/// Multi-scale feature maps, finest level first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<F> {
    pub levels: Vec<FeatureLevel<F>>,
}

impl<F: Scalar> FeaturePyramid<F> {
    pub fn channels(&self) -> usize {
        self.levels.first().map_or(0, |l| l.data.rows())
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(invalid("pyramid has no levels"));
        }
        let c = self.channels();
        for (i, l) in self.levels.iter().enumerate() {
            if l.data.shape != [c, l.h * l.w] {
                return Err(Error::Shape(format!(
                    "level {i}: shape {:?}, expected [{c}, {}]",
                    l.data.shape,
                    l.h * l.w
                )));
            }
            if i > 0 && l.stride <= self.levels[i - 1].stride {
                return Err(invalid("pyramid strides must increase"));
            }
        }
        Ok(())
    }

    /// Places every level on the tape as a constant.
    pub fn to_tape(&self, tape: &mut Tape<F>) -> TapePyramid {
        TapePyramid {
            levels: self
                .levels
                .iter()
                .map(|l| TapeLevel {
                    var: tape.constant(l.data.clone()),
                    stride: l.stride,
                    h: l.h,
                    w: l.w,
                })
                .collect(),
        }
    }

    /// Fixed-size RoI feature for a box.
    pub fn roi_pool(&self, b: BBox, cfg: &ModelConfig) -> Result<RoiFeature<F>> {
        let mut tape = Tape::new();
        let pyr = self.to_tape(&mut tape);
        let v = pyr.roi_pool(&mut tape, b, cfg)?;
        Ok(RoiFeature {
            data: tape.value(v).clone(),
            bbox: b,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TapeLevel {
    pub var: Var,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

/// A [`FeaturePyramid`] whose levels live on an autodiff tape.
#[derive(Debug, Clone)]
pub struct TapePyramid {
    pub levels: Vec<TapeLevel>,
}

impl TapePyramid {
    pub fn values<F: Scalar>(&self, tape: &Tape<F>) -> FeaturePyramid<F> {
        FeaturePyramid {
            levels: self
                .levels
                .iter()
                .map(|l| FeatureLevel {
                    stride: l.stride,
                    h: l.h,
                    w: l.w,
                    data: tape.value(l.var).clone(),
                })
                .collect(),
        }
    }

    /// Bilinear RoI features `[Wr·Hr, C]` (row `by·Wr + bx`) read from the
    /// level matching the box scale.
    pub fn roi_pool<F: Scalar>(&self, tape: &mut Tape<F>, b: BBox, cfg: &ModelConfig) -> Result<Var> {
        if !b.is_valid() {
            return Err(Error::Shape(format!("RoI box {b:?} is not a valid box")));
        }
        let l = &self.levels[select_level(b, self.levels.len())];
        let plan = roi_plan(l.h, l.w, b, cfg.roi_w, cfg.roi_h, SAMPLING_RATIO);
        Ok(tape.resample(l.var, plan))
    }
}

/// Pooled features for one box, `[Wr·Hr, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature<F> {
    pub data: Tensor<F>,
    pub bbox: BBox,
}

/// `clamp(floor(L + log2(sqrt(w·h))), 0, L − 1)`: a half-canvas box lands on
/// the coarsest level, each halving of the side moves one level finer.
pub fn select_level(b: BBox, levels: usize) -> usize {
    let s = (b.w * b.h).sqrt().max(1e-12);
    let l = (levels as f64 + s.log2()).floor();
    l.clamp(0.0, (levels - 1) as f64) as usize
}

/// Bilinear sampling plan for one box on an `h × w` map. Cell `(i, j)` is
/// centered at normalized `((j + 0.5)/w, (i + 0.5)/h)`; samples outside the
/// outermost centers replicate the border.
pub fn roi_plan(h: usize, w: usize, b: BBox, roi_w: usize, roi_h: usize, ratio: usize) -> SamplePlan {
    let [x1, y1, x2, y2] = b.to_corners();
    let (bw, bh) = ((x2 - x1) / roi_w as f64, (y2 - y1) / roi_h as f64);
    let norm = 1.0 / (ratio * ratio) as f64;
    let mut plan = SamplePlan {
        offsets: vec![0],
        idx: Vec::new(),
        weight: Vec::new(),
    };
    let axis = |u: f64, n: usize| -> (usize, usize, f64) {
        let p = (u * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, p - lo as f64)
    };
    for by in 0..roi_h {
        for bx in 0..roi_w {
            for sy in 0..ratio {
                let v = y1 + bh * (by as f64 + (sy as f64 + 0.5) / ratio as f64);
                let (ylo, yhi, fy) = axis(v, h);
                for sx in 0..ratio {
                    let u = x1 + bw * (bx as f64 + (sx as f64 + 0.5) / ratio as f64);
                    let (xlo, xhi, fx) = axis(u, w);
                    for (yy, wy) in [(ylo, 1.0 - fy), (yhi, fy)] {
                        for (xx, wx) in [(xlo, 1.0 - fx), (xhi, fx)] {
                            let wt = wy * wx * norm;
                            if wt != 0.0 {
                                plan.idx.push((yy * w + xx) as u32);
                                plan.weight.push(wt);
                            }
                        }
                    }
                }
            }
            plan.offsets.push(plan.idx.len());
        }
    }
    plan
}

/// Learned toy backbone: `pyramid_levels` stride-2 3×3 convolutions.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    convs: Vec<(ParamId, ParamId)>,
    context: Linear,
}

impl ImageEncoder {
    pub const COORD_CHANNELS: usize = 2;

    pub fn new<F: Scalar>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.roi_channels - Self::COORD_CHANNELS;
        let mut convs = Vec::new();
        for l in 0..cfg.pyramid_levels {
            let c_in = if l == 0 { 3 } else { c };
            let fan = c_in * 9;
            let w = store.add_uniform(format!("encoder.conv{l}.weight"), &[c, fan], fan, rng);
            let b = store.add_uniform(format!("encoder.conv{l}.bias"), &[c], fan, rng);
            convs.push((w, b));
        }
        let context = Linear::new(store, "encoder.context", c, c, true, rng);
        Self { convs, context }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.convs
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .chain(self.context.params())
            .collect()
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        stem: &StemImage,
        cfg: &ModelConfig,
    ) -> TapePyramid {
        let c = cfg.roi_channels - Self::COORD_CHANNELS;
        let mut x = tape.constant(Tensor::from_f64(&[3, stem.h * stem.w], &stem.data));
        let (mut h, mut w, mut c_in) = (stem.h, stem.w, 3);
        let mut stride = cfg.stem_pool as usize;
        let mut raw = Vec::new();
        for &(wid, bid) in &self.convs {
            let geo = ConvGeometry {
                c_in,
                h,
                w,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            let wv = store.var(tape, wid);
            let bv = store.var(tape, bid);
            let y = tape.conv2d(x, wv, geo);
            let y = tape.add_col(y, bv);
            x = tape.silu(y);
            h = geo.out_h();
            w = geo.out_w();
            c_in = c;
            stride *= 2;
            raw.push((x, h, w, stride));
        }
        let pooled = tape.mean_cols(x);
        let ctx = self.context.forward(tape, store, pooled);
        let levels = raw
            .into_iter()
            .map(|(v, h, w, stride)| {
                let v = tape.add_col(v, ctx);
                let coords = tape.constant(coordinate_channels(h, w));
                TapeLevel {
                    var: tape.concat_rows(&[v, coords]),
                    stride,
                    h,
                    w,
                }
            })
            .collect();
        TapePyramid { levels }
    }

    /// Evaluates the encoder without recording gradients.
    pub fn encode<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        image: &RgbRaster,
        cfg: &ModelConfig,
    ) -> Result<FeaturePyramid<F>> {
        let stem = preprocess(image, cfg)?;
        let mut tape = Tape::new();
        let pyr = self.forward(&mut tape, store, &stem, cfg);
        Ok(pyr.values(&tape))
    }
}

fn coordinate_channels<F: Scalar>(h: usize, w: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(2 * h * w);
    for _ in 0..h {
        for j in 0..w {
            data.push(F::of((j as f64 + 0.5) / w as f64));
        }
    }
    for i in 0..h {
        for _ in 0..w {
            data.push(F::of((i as f64 + 0.5) / h as f64));
        }
    }
    Tensor::new(vec![2, h * w], data)
}

/// Lower-cased tokens; runs of non-ASCII characters are split per character.
pub fn tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in s.split_whitespace() {
        let mut ascii = String::new();
        for ch in word.chars() {
            if ch.is_ascii() {
                ascii.push(ch.to_ascii_lowercase());
            } else {
                if !ascii.is_empty() {
                    out.push(std::mem::take(&mut ascii));
                }
                out.push(ch.to_string());
            }
        }
        if !ascii.is_empty() {
            out.push(ascii);
        }
    }
    out
}

/// FNV-1a hash of a token, reduced to a table row.
pub fn token_id(token: &str, vocab: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h % vocab as u64) as usize
}

/// Sinusoidal encoding of a character count into `dim` values
/// (`sin`, `cos` pairs at geometrically spaced frequencies).
pub fn length_encoding(len: usize, dim: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let freq = 10000f64.powf(-(2.0 * k as f64) / dim as f64);
        let a = len as f64 * freq;
        v.push(a.sin());
        v.push(a.cos());
    }
    v
}

/// Padded slogan features `[D_n, d]` with a row mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures<F> {
    pub matrix: Tensor<F>,
    pub mask: Vec<bool>,
}

/// Hashed bag-of-tokens content embedding plus length encoding.
#[derive(Debug, Clone, Copy)]
pub struct TextEncoder {
    table: ParamId,
}

impl TextEncoder {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let dim = cfg.content_dim();
        let table = store.add_uniform("text.embedding", &[cfg.text_vocab, dim], dim, rng);
        Self { table }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.table]
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        slogans: &[String],
        cfg: &ModelConfig,
    ) -> Result<(Var, Vec<bool>)> {
        let dn = cfg.max_slogans;
        if slogans.len() > dn {
            return Err(invalid(format!(
                "{} slogans exceed the limit of {dn}",
                slogans.len()
            )));
        }
        let rows: Vec<Vec<usize>> = (0..dn)
            .map(|i| {
                slogans.get(i).map_or_else(Vec::new, |s| {
                    tokenize(s).iter().map(|t| token_id(t, cfg.text_vocab)).collect()
                })
            })
            .collect();
        let table = store.var(tape, self.table);
        let content = tape.embed_mean(table, rows);
        let ld = cfg.length_dim();
        let mut lens = vec![0.0; dn * ld];
        for (i, s) in slogans.iter().enumerate() {
            lens[i * ld..(i + 1) * ld].copy_from_slice(&length_encoding(s.chars().count(), ld));
        }
        let lens = tape.constant(Tensor::from_f64(&[dn, ld], &lens));
        let mask = (0..dn).map(|i| i < slogans.len()).collect();
        Ok((tape.concat_cols(&[content, lens]), mask))
    }

    pub fn encode<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        slogans: &[String],
        cfg: &ModelConfig,
    ) -> Result<TextFeatures<F>> {
        let mut tape = Tape::new();
        let (v, mask) = self.forward(&mut tape, store, slogans, cfg)?;
        Ok(TextFeatures {
            matrix: tape.value(v).clone(),
            mask,
        })
    }
}

/// Writes a pyramid as `<dir>/<id>.feat` for later substitution of the
/// learned encoder by externally computed features.
pub fn save_precomputed(dir: &Path, id: &str, pyr: &FeaturePyramid<f32>) -> Result<()> {
    pyr.validate()?;
    let manifest = serde_json::json!({
        "kind": "feature-pyramid",
        "id": id,
        "levels": pyr.levels.iter().map(|l| serde_json::json!({
            "stride": l.stride, "h": l.h, "w": l.w
        })).collect::<Vec<_>>(),
    });
    let tensors: Vec<(String, Tensor<f32>)> = pyr
        .levels
        .iter()
        .enumerate()
        .map(|(i, l)| (format!("level{i}"), l.data.clone()))
        .collect();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{id}.feat")), container::encode(&manifest, &tensors))?;
    Ok(())
}

pub fn load_precomputed(dir: &Path, id: &str) -> Result<FeaturePyramid<f32>> {
    let bytes = std::fs::read(dir.join(format!("{id}.feat")))?;
    let c = container::decode(&bytes)?;
    let levels = c.manifest["levels"]
        .as_array()
        .ok_or_else(|| Error::Malformed("feature manifest lacks levels".into()))?;
    let mut out = Vec::new();
    for (i, l) in levels.iter().enumerate() {
        let get = |k: &str| {
            l[k].as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Malformed(format!("level {i} lacks {k}")))
        };
        let data = c
            .tensor(&format!("level{i}"))
            .ok_or_else(|| Error::Malformed(format!("missing tensor level{i}")))?
            .clone();
        out.push(FeatureLevel {
            stride: get("stride")?,
            h: get("h")?,
            w: get("w")?,
            data,
        });
    }
    let pyr = FeaturePyramid { levels: out };
    pyr.validate()?;
    Ok(pyr)
}
