//! The generation request schema shared by the HTTP service and the CLI
//! constraints file, and the response it produces.

use std::fmt;
use std::path::PathBuf;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::diffusion::{GenerationConstraints, SampleOptions, TrajectoryStep};
use crate::types::{BBox, Element, ElementClass, Layout, ModelConfig, RgbRaster};

pub const DEFAULT_STEPS: usize = 100;

fn default_steps() -> usize {
    DEFAULT_STEPS
}

/// Background image supplied with the request instead of a dataset id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageRef {
    /// Local file; accepted from the CLI only.
    Path(PathBuf),
    /// Base64-encoded PNG or JPEG bytes.
    Base64(String),
}

/// A pinned element: `slot` is the query slot whose box is held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pin {
    pub slot: usize,
    pub cls: ElementClass,
    #[serde(rename = "box", with = "crate::types::bbox_array")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    #[serde(default)]
    pub slogans: Vec<String>,
    #[serde(default)]
    pub pinned: Vec<Pin>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Include the per-step trajectory in the response.
    #[serde(default)]
    pub trajectory: bool,
}

impl Default for GenerateRequest {
    fn default() -> Self {
        Self {
            sample_id: None,
            image: None,
            slogans: Vec::new(),
            pinned: Vec::new(),
            steps: DEFAULT_STEPS,
            seed: 0,
            trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn join(errors: &[FieldError]) -> String {
    errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Rejection of a request, each variant mapping to one HTTP status.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RequestError {
    #[error("malformed request: {}", join(.0))]
    Malformed(Vec<FieldError>),
    #[error("unknown sample {0:?}")]
    UnknownSample(String),
    #[error("infeasible constraints: {}", join(.0))]
    Infeasible(Vec<FieldError>),
}

impl RequestError {
    pub fn status(&self) -> u16 {
        match self {
            Self::Malformed(_) => 400,
            Self::UnknownSample(_) => 404,
            Self::Infeasible(_) => 422,
        }
    }

    pub fn fields(&self) -> Vec<FieldError> {
        match self {
            Self::Malformed(f) | Self::Infeasible(f) => f.clone(),
            Self::UnknownSample(id) => vec![FieldError::new("sample_id", format!("no sample named {id:?}"))],
        }
    }

    /// JSON error body: `{"error": …, "fields": [{"field", "message"}]}`.
    pub fn body(&self) -> String {
        serde_json::json!({ "error": self.to_string(), "fields": self.fields() }).to_string()
    }

    fn malformed(field: &str, message: impl Into<String>) -> Self {
        Self::Malformed(vec![FieldError::new(field, message)])
    }
}

impl GenerateRequest {
    pub fn parse(body: &[u8]) -> Result<Self, RequestError> {
        serde_json::from_slice(body).map_err(|e| RequestError::malformed("body", e.to_string()))
    }

    /// Checks the request against a model with `cfg`. Field problems are
    /// malformed (400); constraints the model cannot honour are infeasible
    /// (422). `allow_paths` admits [`ImageRef::Path`].
    pub fn validate(&self, cfg: &ModelConfig, allow_paths: bool) -> Result<(), RequestError> {
        let mut bad = Vec::new();
        match (&self.sample_id, &self.image) {
            (None, None) => bad.push(FieldError::new("sample_id", "either sample_id or image is required")),
            (Some(_), Some(_)) => bad.push(FieldError::new("image", "give sample_id or image, not both")),
            (Some(id), None) if id.is_empty() => bad.push(FieldError::new("sample_id", "must not be empty")),
            (None, Some(ImageRef::Path(_))) if !allow_paths => {
                bad.push(FieldError::new("image.path", "file paths are not accepted here; send base64"))
            }
            _ => {}
        }
        if self.steps == 0 || self.steps > cfg.steps {
            bad.push(FieldError::new("steps", format!("must be in [1, {}], got {}", cfg.steps, self.steps)));
        }
        for (i, s) in self.slogans.iter().enumerate() {
            if s.trim().is_empty() {
                bad.push(FieldError::new(format!("slogans[{i}]"), "must not be blank"));
            }
        }
        for (i, p) in self.pinned.iter().enumerate() {
            if p.cls == ElementClass::Background {
                bad.push(FieldError::new(format!("pinned[{i}].cls"), "background cannot be pinned"));
            }
            if !p.bbox.is_valid() {
                bad.push(FieldError::new(
                    format!("pinned[{i}].box"),
                    format!("{:?} is not a box inside the unit square", p.bbox.to_array()),
                ));
            }
        }
        if !bad.is_empty() {
            return Err(RequestError::Malformed(bad));
        }

        let mut infeasible = Vec::new();
        let mut seen = vec![None; cfg.n_queries];
        for (i, p) in self.pinned.iter().enumerate() {
            let field = format!("pinned[{i}].slot");
            match seen.get_mut(p.slot) {
                None => infeasible.push(FieldError::new(
                    field,
                    format!("slot {} is out of range; the model has {} slots", p.slot, cfg.n_queries),
                )),
                Some(Some(j)) => infeasible.push(FieldError::new(field, format!("slot {} is already pinned by pinned[{j}]", p.slot))),
                Some(s) => *s = Some(i),
            }
        }
        if self.slogans.len() > cfg.max_slogans {
            infeasible.push(FieldError::new(
                "slogans",
                format!("{} slogans exceed the model limit of {}", self.slogans.len(), cfg.max_slogans),
            ));
        }
        if infeasible.is_empty() {
            Ok(())
        } else {
            Err(RequestError::Infeasible(infeasible))
        }
    }

    pub fn constraints(&self) -> GenerationConstraints {
        GenerationConstraints {
            pinned: self
                .pinned
                .iter()
                .map(|p| (p.slot, Element::new(p.cls, p.bbox)))
                .collect(),
            slogans: self.slogans.clone(),
            seed: self.seed,
        }
    }

    pub fn options(&self) -> SampleOptions {
        SampleOptions {
            steps: self.steps,
            record_trajectory: self.trajectory,
            ..SampleOptions::default()
        }
    }

    /// Decodes a base64 inline image; `None` for other image sources.
    pub fn inline_image(&self) -> Result<Option<RgbRaster>, RequestError> {
        let Some(ImageRef::Base64(data)) = &self.image else {
            return Ok(None);
        };
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(data.trim())
            .map_err(|e| RequestError::malformed("image.base64", e.to_string()))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| RequestError::malformed("image.base64", e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Some(RgbRaster {
            width: w,
            height: h,
            data: img.into_raw(),
        }))
    }
}

/// The constraint fields of a request, echoed in the response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintEcho {
    pub slogans: Vec<String>,
    pub pinned: Vec<Pin>,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub layout: Layout,
    pub constraints: ConstraintEcho,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<TrajectoryStep>>,
}

impl GenerateResponse {
    pub fn new(req: &GenerateRequest, layout: Layout, trajectory: Vec<TrajectoryStep>) -> Self {
        Self {
            layout,
            constraints: ConstraintEcho {
                slogans: req.slogans.clone(),
                pinned: req.pinned.clone(),
                steps: req.steps,
                seed: req.seed,
            },
            trajectory: req.trajectory.then_some(trajectory),
        }
    }
}

/// One JSON object per line, one line per sampling step.
pub fn trajectory_jsonl(steps: &[TrajectoryStep]) -> String {
    steps
        .iter()
        .map(|s| serde_json::to_string(s).expect("trajectory serialization is infallible") + "\n")
        .collect()
}
