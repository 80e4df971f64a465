//! Shared domain types: boxes, elements, layouts, rasters, samples and the
//! model configuration.
//!
//! Boxes are stored in normalized center format (`cx`, `cy`, `w`, `h` as
//! fractions of the canvas) independent of the raster resolution.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Axis-aligned box in normalized center format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Lower bound on width and height after clamping.
    pub const MIN_SIZE: f64 = 1e-3;

    // Corners may sit this far outside [0, 1] from center/size rounding.
    const CORNER_SLACK: f64 = 1e-12;

    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)` corners.
    pub fn to_corners(self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// Measured on the corners, so that containment and identity give exact
    /// ratios against [`BBox::intersection`].
    pub fn area(self) -> f64 {
        let [x1, y1, x2, y2] = self.to_corners();
        (x2 - x1).max(0.0) * (y2 - y1).max(0.0)
    }

    pub fn intersection(self, other: BBox) -> f64 {
        let a = self.to_corners();
        let b = other.to_corners();
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        iw * ih
    }

    pub fn iou(self, other: BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Fraction of `self` covered by `other`.
    pub fn covered_by(self, other: BBox) -> f64 {
        let a = self.area();
        if a <= 0.0 {
            0.0
        } else {
            self.intersection(other) / a
        }
    }

    /// True when the box satisfies the post-clamp invariants.
    pub fn is_valid(self) -> bool {
        let [x1, y1, x2, y2] = self.to_corners();
        let s = Self::CORNER_SLACK;
        self.cx.is_finite()
            && self.cy.is_finite()
            && self.w >= Self::MIN_SIZE
            && self.h >= Self::MIN_SIZE
            && self.w <= 1.0
            && self.h <= 1.0
            && x1 >= -s
            && y1 >= -s
            && x2 <= 1.0 + s
            && y2 <= 1.0 + s
    }

    /// Clamps corners into the unit square and floors width and height at
    /// [`BBox::MIN_SIZE`]. Valid boxes are returned unchanged.
    pub fn clamp(self) -> BBox {
        if self.is_valid() {
            return self;
        }
        let (cx, w) = clamp_axis(self.cx, self.w);
        let (cy, h) = clamp_axis(self.cy, self.h);
        BBox::new(cx, cy, w, h)
    }
}

fn clamp_axis(c: f64, size: f64) -> (f64, f64) {
    let c = if c.is_finite() { c } else { 0.5 };
    let size = if size.is_finite() { size } else { 0.0 };
    let lo = (c - size / 2.0).clamp(0.0, 1.0);
    let hi = (c + size / 2.0).clamp(0.0, 1.0);
    let len = (hi - lo).max(BBox::MIN_SIZE);
    let mid = ((lo + hi) / 2.0).clamp(len / 2.0, 1.0 - len / 2.0);
    (mid, len)
}

/// Element category. `Background` only labels padding slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementClass {
    Logo,
    Text,
    Underlay,
    Embellishment,
    Background,
}

impl ElementClass {
    pub const COUNT: usize = 5;
    pub const ALL: [ElementClass; 5] = [
        ElementClass::Logo,
        ElementClass::Text,
        ElementClass::Underlay,
        ElementClass::Embellishment,
        ElementClass::Background,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementClass::Logo => "logo",
            ElementClass::Text => "text",
            ElementClass::Underlay => "underlay",
            ElementClass::Embellishment => "embellishment",
            ElementClass::Background => "background",
        }
    }
}

impl std::str::FromStr for ElementClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| invalid(format!("unknown element class {s:?}")))
    }
}

/// A class-tagged box with a confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub cls: ElementClass,
    #[serde(rename = "box", with = "bbox_array")]
    pub bbox: BBox,
    #[serde(default = "one")]
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

impl Element {
    pub fn new(cls: ElementClass, bbox: BBox) -> Self {
        Self { cls, bbox, score: 1.0 }
    }
}

pub(crate) mod bbox_array {
    use super::BBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        b.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        <[f64; 4]>::deserialize(d).map(BBox::from_array)
    }
}

/// An ordered set of elements on a canvas of `canvas_w × canvas_h` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayoutJson", into = "LayoutJson")]
pub struct Layout {
    pub elements: Vec<Element>,
    pub canvas_w: u32,
    pub canvas_h: u32,
}

#[derive(Serialize, Deserialize)]
struct LayoutJson {
    canvas: [u32; 2],
    elements: Vec<Element>,
}

impl TryFrom<LayoutJson> for Layout {
    type Error = Error;

    fn try_from(j: LayoutJson) -> Result<Self> {
        let layout = Layout {
            elements: j.elements,
            canvas_w: j.canvas[0],
            canvas_h: j.canvas[1],
        };
        layout.validate()?;
        Ok(layout)
    }
}

impl From<Layout> for LayoutJson {
    fn from(l: Layout) -> Self {
        LayoutJson {
            canvas: [l.canvas_w, l.canvas_h],
            elements: l.elements,
        }
    }
}

impl Layout {
    pub fn new(canvas_w: u32, canvas_h: u32, elements: Vec<Element>) -> Self {
        Self {
            elements,
            canvas_w,
            canvas_h,
        }
    }

    pub fn empty(canvas_w: u32, canvas_h: u32) -> Self {
        Self::new(canvas_w, canvas_h, Vec::new())
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas_w == 0 || self.canvas_h == 0 {
            return Err(invalid("layout canvas must be non-empty"));
        }
        for (i, e) in self.elements.iter().enumerate() {
            if e.cls == ElementClass::Background {
                return Err(invalid(format!("element {i}: background is not a layout class")));
            }
            if !(0.0..=1.0).contains(&e.score) {
                return Err(invalid(format!("element {i}: score {} outside [0, 1]", e.score)));
            }
            if !e.bbox.to_array().iter().all(|v| v.is_finite()) {
                return Err(invalid(format!("element {i}: non-finite box")));
            }
        }
        Ok(())
    }

    pub fn count(&self, cls: ElementClass) -> usize {
        self.elements.iter().filter(|e| e.cls == cls).count()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("layout serialization is infallible")
    }
}

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbRaster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl RgbRaster {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize * 3],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put_pixel(&mut self, x: u32, y: u32, p: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&p);
    }

    /// Luma in [0, 1] (Rec. 601 weights).
    pub fn to_gray(&self) -> GrayRaster {
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
            .collect();
        GrayRaster {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Single-channel float raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayRaster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl GrayRaster {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> f32) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[y as usize * self.width as usize + x as usize]
    }
}

/// One poster: background, saliency map, slogans and ground-truth layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PosterSample {
    pub id: String,
    pub image: RgbRaster,
    pub saliency: GrayRaster,
    pub slogans: Vec<String>,
    pub gt: Layout,
}

impl PosterSample {
    pub fn validate(&self, max_slogans: usize) -> Result<()> {
        let bad = |msg: String| Error::Record {
            id: self.id.clone(),
            msg,
        };
        if self.image.is_empty() {
            return Err(bad("empty image".into()));
        }
        if (self.saliency.width, self.saliency.height) != (self.image.width, self.image.height) {
            return Err(bad("saliency size differs from image size".into()));
        }
        if self.saliency.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(bad("saliency values outside [0, 1]".into()));
        }
        if self.slogans.len() > max_slogans {
            return Err(bad(format!(
                "{} slogans exceed the limit of {max_slogans}",
                self.slogans.len()
            )));
        }
        self.gt.validate().map_err(|e| bad(e.to_string()))
    }
}

/// Which beta schedule the diffusion process uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

/// Architecture and diffusion hyperparameters. Serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of query boxes diffused per sample.
    pub n_queries: usize,
    /// Maximum number of slogans (text rows are padded to this count).
    pub max_slogans: usize,
    /// Text feature width; a quarter of it carries the length encoding.
    pub text_dim: usize,
    /// RoI feature channels.
    pub roi_channels: usize,
    pub roi_w: usize,
    pub roi_h: usize,
    /// Width of the sinusoidal pairwise geometry embedding.
    pub geo_embed_dim: usize,
    /// Width of the relation-weighted geometry features.
    pub geo_feat_dim: usize,
    pub num_classes: usize,
    /// Diffusion steps.
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub signal_scale: f64,
    /// Floor applied to center offsets before taking logs.
    pub eps_geo: f64,
    /// Hidden width of the decoder heads.
    pub hidden_dim: usize,
    /// Width of the sinusoidal timestep embedding.
    pub time_embed_dim: usize,
    /// Rows of the hashed token embedding table.
    pub text_vocab: usize,
    /// Encoder input resolution `(width, height)`.
    pub image_size: (u32, u32),
    /// Fixed average-pooling factor applied before the learned convolutions.
    pub stem_pool: u32,
    /// Number of pyramid levels produced by the encoder.
    pub pyramid_levels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_queries: 16,
            max_slogans: 8,
            text_dim: 64,
            roi_channels: 64,
            roi_w: 7,
            roi_h: 7,
            geo_embed_dim: 64,
            geo_feat_dim: 256,
            num_classes: ElementClass::COUNT,
            steps: 1000,
            schedule: ScheduleKind::Cosine,
            signal_scale: 1.0,
            eps_geo: 1e-3,
            hidden_dim: 256,
            time_embed_dim: 64,
            text_vocab: 4096,
            image_size: (384, 600),
            stem_pool: 8,
            pyramid_levels: 3,
        }
    }
}

impl ModelConfig {
    /// A small configuration for fast experiments and tests.
    pub fn tiny() -> Self {
        Self {
            n_queries: 8,
            max_slogans: 4,
            text_dim: 32,
            roi_channels: 16,
            roi_w: 4,
            roi_h: 4,
            geo_embed_dim: 64,
            geo_feat_dim: 64,
            hidden_dim: 128,
            time_embed_dim: 32,
            text_vocab: 512,
            ..Self::default()
        }
    }

    pub fn roi_positions(&self) -> usize {
        self.roi_w * self.roi_h
    }

    /// Flattened RoI feature width `C · Wr · Hr`.
    pub fn roi_flat(&self) -> usize {
        self.roi_channels * self.roi_positions()
    }

    pub fn length_dim(&self) -> usize {
        self.text_dim / 4
    }

    pub fn content_dim(&self) -> usize {
        self.text_dim - self.length_dim()
    }

    /// Width of the fused decoder input.
    pub fn decoder_in(&self) -> usize {
        2 * self.roi_flat() + self.geo_feat_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_queries", self.n_queries),
            ("max_slogans", self.max_slogans),
            ("text_dim", self.text_dim),
            ("roi_channels", self.roi_channels),
            ("roi_w", self.roi_w),
            ("roi_h", self.roi_h),
            ("geo_embed_dim", self.geo_embed_dim),
            ("geo_feat_dim", self.geo_feat_dim),
            ("steps", self.steps),
            ("hidden_dim", self.hidden_dim),
            ("time_embed_dim", self.time_embed_dim),
            ("text_vocab", self.text_vocab),
            ("stem_pool", self.stem_pool as usize),
            ("pyramid_levels", self.pyramid_levels),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.geo_embed_dim % 8 != 0 {
            return Err(invalid(format!(
                "geo_embed_dim {} must be divisible by 8",
                self.geo_embed_dim
            )));
        }
        if self.text_dim % 8 != 0 {
            return Err(invalid(format!("text_dim {} must be divisible by 8", self.text_dim)));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(invalid("time_embed_dim must be even"));
        }
        if self.num_classes != ElementClass::COUNT {
            return Err(invalid(format!(
                "num_classes must be {}, got {}",
                ElementClass::COUNT,
                self.num_classes
            )));
        }
        if self.roi_channels < 3 {
            return Err(invalid("roi_channels must be at least 3"));
        }
        if !(self.signal_scale > 0.0 && self.signal_scale.is_finite()) {
            return Err(invalid("signal_scale must be positive"));
        }
        if !(self.eps_geo > 0.0) {
            return Err(invalid("eps_geo must be positive"));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(invalid("image_size must be non-empty"));
        }
        let (w, h) = self.image_size;
        let min_side = w.min(h) / self.stem_pool;
        if min_side >> self.pyramid_levels == 0 {
            return Err(invalid("image_size too small for the pyramid depth"));
        }
        Ok(())
    }
}
