//! Procedural posters whose layouts follow learnable rules: texts avoid
//! salient blobs, text width grows with slogan length, and underlays sit
//! beneath a text box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::types::{BBox, Element, ElementClass, GrayRaster, Layout, PosterSample, RgbRaster};

/// Shortest and longest generated slogan, in characters.
pub const SLOGAN_CHARS: (usize, usize) = (4, 40);
/// Text width at the shortest slogan and at the longest one.
const TEXT_WIDTHS: (f64, f64) = (0.15, 0.8);
pub const TEXT_HEIGHT: f64 = 0.05;
/// Margin between an underlay and the text it carries.
pub const UNDERLAY_MARGIN: f64 = 0.015;
/// Saliency at or above this value counts as subject.
pub const SUBJECT_LEVEL: f32 = 0.5;
const PLACEMENT_TRIES: usize = 60;
const MAX_ATTEMPTS: u64 = 64;
/// Gap kept between logo and text boxes.
const GAP: f64 = 0.01;

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "su", "re", "ta", "no", "vi", "pe", "ra", "zu", "fo", "be", "di", "gu", "sha",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub count: usize,
    pub seed: u64,
    /// Canvas `(width, height)` in pixels.
    pub canvas: (u32, u32),
    /// Inclusive range of salient-blob counts.
    pub blobs: (usize, usize),
    /// Inclusive range of text-element counts.
    pub texts: (usize, usize),
    pub underlay_prob: f64,
    pub embellish_prob: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 512,
            seed: 0,
            canvas: (192, 300),
            blobs: (1, 3),
            texts: (1, 3),
            underlay_prob: 0.5,
            embellish_prob: 0.3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.canvas.0 < 16 || self.canvas.1 < 16 {
            return Err(invalid(format!("canvas {:?} is smaller than 16×16", self.canvas)));
        }
        for (name, (lo, hi)) in [("blobs", self.blobs), ("texts", self.texts)] {
            if lo > hi {
                return Err(invalid(format!("{name} range {lo}..={hi} is empty")));
            }
        }
        if self.texts.0 == 0 {
            return Err(invalid("at least one text element is required"));
        }
        for (name, p) in [("underlay_prob", self.underlay_prob), ("embellish_prob", self.embellish_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Text box width for a slogan of `chars` characters, before clamping.
pub fn text_width(chars: usize) -> f64 {
    let per_char = (TEXT_WIDTHS.1 - TEXT_WIDTHS.0) / (SLOGAN_CHARS.1 - SLOGAN_CHARS.0) as f64;
    TEXT_WIDTHS.0 + per_char * (chars as f64 - SLOGAN_CHARS.0 as f64)
}

/// Generates `spec.count` samples; sample `k` depends only on `(seed, k)`.
pub fn generate(spec: &SynthSpec) -> Result<Vec<PosterSample>> {
    spec.validate()?;
    (0..spec.count).map(|k| generate_one(spec, k)).collect()
}

pub fn generate_one(spec: &SynthSpec, index: usize) -> Result<PosterSample> {
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        rng.set_stream(index as u64);
        if let Some(s) = try_generate(spec, index, &mut rng) {
            return Ok(s);
        }
    }
    Err(Error::Record {
        id: sample_id(index),
        msg: format!("no feasible placement after {MAX_ATTEMPTS} attempts"),
    })
}

pub fn sample_id(index: usize) -> String {
    format!("synth-{index:05}")
}

struct Blob {
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
    color: [f64; 3],
}

fn try_generate(spec: &SynthSpec, index: usize, rng: &mut ChaCha8Rng) -> Option<PosterSample> {
    let (w, h) = spec.canvas;
    let top: [f64; 3] = std::array::from_fn(|_| rng.random_range(40.0..230.0));
    let bottom: [f64; 3] = std::array::from_fn(|_| rng.random_range(40.0..230.0));
    let blobs: Vec<Blob> = (0..rng.random_range(spec.blobs.0..=spec.blobs.1))
        .map(|_| {
            let s = rng.random_range(0.07..0.13);
            Blob {
                cx: rng.random_range(0.15..0.85),
                cy: rng.random_range(0.25..0.85),
                sx: s,
                sy: s * w as f64 / h as f64 * rng.random_range(0.8..1.25),
                color: std::array::from_fn(|_| rng.random_range(0.0..255.0)),
            }
        })
        .collect();

    let mut sal = vec![0f32; (w * h) as usize];
    let image = RgbRaster::from_fn(w, h, |x, y| {
        let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
        let mut px: [f64; 3] = std::array::from_fn(|c| top[c] + (bottom[c] - top[c]) * v);
        let mut s: f64 = 0.0;
        for b in &blobs {
            let d = ((u - b.cx) / b.sx).powi(2) + ((v - b.cy) / b.sy).powi(2);
            let a = (-0.5 * d).exp();
            s = s.max(a);
            for c in 0..3 {
                px[c] = px[c] * (1.0 - a) + b.color[c] * a;
            }
        }
        // Quantized like the PNG it is stored as.
        sal[(y * w + x) as usize] = (s * 255.0).round() as f32 / 255.0;
        px.map(|c| c.round().clamp(0.0, 255.0) as u8)
    });
    let saliency = GrayRaster {
        width: w,
        height: h,
        data: sal,
    };

    let mut placed: Vec<BBox> = Vec::new();
    let mut elements = Vec::new();

    let lw = rng.random_range(0.12..0.22);
    let lh = rng.random_range(0.04..0.07);
    let logo = best_spot(rng, &saliency, &placed, lw, lh, (0.03, 0.13))?;
    placed.push(logo);
    elements.push(Element::new(ElementClass::Logo, logo));

    let n_text = rng.random_range(spec.texts.0..=spec.texts.1);
    let mut slogans = Vec::with_capacity(n_text);
    let mut texts = Vec::with_capacity(n_text);
    for _ in 0..n_text {
        let len = rng.random_range(SLOGAN_CHARS.0..=SLOGAN_CHARS.1);
        let slogan = random_slogan(rng, len);
        let b = best_spot(rng, &saliency, &placed, text_width(len).min(0.9), TEXT_HEIGHT, (0.15, 0.97))?;
        placed.push(b);
        texts.push(b);
        slogans.push(slogan);
        elements.push(Element::new(ElementClass::Text, b));
    }

    if rng.random_bool(spec.underlay_prob) {
        let t = texts[rng.random_range(0..texts.len())];
        let [x1, y1, x2, y2] = t.to_corners();
        let u = BBox::from_corners(
            (x1 - UNDERLAY_MARGIN).max(0.0),
            (y1 - UNDERLAY_MARGIN).max(0.0),
            (x2 + UNDERLAY_MARGIN).min(1.0),
            (y2 + UNDERLAY_MARGIN).min(1.0),
        );
        elements.push(Element::new(ElementClass::Underlay, u));
    }

    if rng.random_bool(spec.embellish_prob) {
        let s = rng.random_range(0.05..0.1);
        if let Some(e) = best_spot(rng, &saliency, &placed, s, s * w as f64 / h as f64, (0.05, 0.97)) {
            elements.push(Element::new(ElementClass::Embellishment, e));
        }
    }

    Some(PosterSample {
        id: sample_id(index),
        image,
        saliency,
        slogans,
        gt: Layout::new(w, h, elements),
    })
}

/// Random box of the given size with its vertical extent inside `band`,
/// clear of subject pixels and of `placed`; the candidate with the lowest
/// mean saliency wins.
fn best_spot(
    rng: &mut ChaCha8Rng,
    sal: &GrayRaster,
    placed: &[BBox],
    bw: f64,
    bh: f64,
    band: (f64, f64),
) -> Option<BBox> {
    let x_range = (bw / 2.0 + 0.02, 1.0 - bw / 2.0 - 0.02);
    let y_range = (band.0 + bh / 2.0, band.1 - bh / 2.0);
    if x_range.0 > x_range.1 || y_range.0 > y_range.1 {
        return None;
    }
    let mut best: Option<(f64, BBox)> = None;
    for _ in 0..PLACEMENT_TRIES {
        let b = BBox::new(
            rng.random_range(x_range.0..=x_range.1),
            rng.random_range(y_range.0..=y_range.1),
            bw,
            bh,
        );
        let padded = BBox::new(b.cx, b.cy, b.w + 2.0 * GAP, b.h + 2.0 * GAP);
        if placed.iter().any(|p| padded.intersection(*p) > 0.0) {
            continue;
        }
        let Some((mean, max)) = box_stats(sal, b) else { continue };
        if max >= SUBJECT_LEVEL {
            continue;
        }
        if best.is_none_or(|(m, _)| (mean as f64) < m) {
            best = Some((mean as f64, b));
        }
    }
    best.map(|(_, b)| b)
}

/// Pixels whose centers fall inside `b`, as inclusive index ranges.
pub fn pixel_span(b: BBox, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
    let [x1, y1, x2, y2] = b.to_corners();
    let lo = |v: f64, n: u32| ((v * n as f64 - 0.5).ceil().max(0.0)) as u32;
    let hi = |v: f64, n: u32| ((v * n as f64 - 0.5).floor().min(n as f64 - 1.0)) as i64;
    let (px1, py1) = (lo(x1, width), lo(y1, height));
    let (px2, py2) = (hi(x2, width), hi(y2, height));
    if px2 < px1 as i64 || py2 < py1 as i64 {
        return None;
    }
    Some((px1, py1, px2 as u32, py2 as u32))
}

fn box_stats(sal: &GrayRaster, b: BBox) -> Option<(f32, f32)> {
    let (x1, y1, x2, y2) = pixel_span(b, sal.width, sal.height)?;
    let (mut sum, mut max, mut n) = (0f32, 0f32, 0u32);
    for y in y1..=y2 {
        for x in x1..=x2 {
            let v = sal.get(x, y);
            sum += v;
            max = max.max(v);
            n += 1;
        }
    }
    Some((sum / n as f32, max))
}

/// Syllable words separated by spaces, exactly `len` characters long.
pub fn random_slogan(rng: &mut ChaCha8Rng, len: usize) -> String {
    let mut s = String::with_capacity(len + 4);
    let mut word = 0;
    while s.len() < len {
        if word >= 2 && rng.random_bool(0.3) && s.len() + 2 < len {
            s.push(' ');
            word = 0;
        }
        s.push_str(SYLLABLES[rng.random_range(0..SYLLABLES.len())]);
        word += 1;
    }
    s.truncate(len);
    s
}
