//! HTTP service: generation, health, dataset listing and the UI bundle.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde_json::json;
use tower_http::services::ServeDir;

use radm_core::checkpoint::{config_digest, Checkpoint};
use radm_core::dataset::{load_manifest, load_sample, SampleRecord};
use radm_core::diffusion::{sample, DiffusionSchedule};
use radm_core::model::RadmModel;
use radm_core::request::{GenerateRequest, GenerateResponse, RequestError};

/// A checkpoint ready to serve.
pub struct LoadedModel {
    pub model: RadmModel<f32>,
    pub schedule: DiffusionSchedule,
    pub digest: String,
    pub variant: &'static str,
    pub git: String,
    pub step: usize,
}

impl LoadedModel {
    pub fn new(c: Checkpoint) -> radm_core::Result<Self> {
        let schedule = DiffusionSchedule::new(c.model.cfg.steps, c.model.cfg.schedule)?;
        Ok(Self {
            digest: config_digest(&c.model.cfg),
            variant: c.model.flags.name(),
            git: c.meta.git,
            step: c.meta.step,
            schedule,
            model: c.model,
        })
    }
}

/// Dataset directory whose backgrounds can be referenced by id.
pub struct Dataset {
    pub dir: PathBuf,
    pub records: BTreeMap<String, SampleRecord>,
}

impl Dataset {
    pub fn open(dir: &Path) -> radm_core::Result<Self> {
        let records = load_manifest(dir)?.into_iter().map(|r| (r.id.clone(), r)).collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            records,
        })
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    pub model: Option<Arc<LoadedModel>>,
    pub dataset: Option<Arc<Dataset>>,
}

pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/samples", get(samples))
        .route("/api/generate", post(generate))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

fn json_response(status: StatusCode, body: impl Into<axum::body::Body>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body.into()).into_response()
}

async fn health(State(s): State<AppState>) -> Response {
    let body = match &s.model {
        Some(m) => json!({
            "status": "ok",
            "model_loaded": true,
            "config_digest": m.digest,
            "variant": m.variant,
            "step": m.step,
            "git": m.git,
        }),
        None => json!({ "status": "ok", "model_loaded": false }),
    };
    json_response(StatusCode::OK, body.to_string())
}

async fn samples(State(s): State<AppState>) -> Response {
    let ids: Vec<&String> = s.dataset.as_ref().map(|d| d.records.keys().collect()).unwrap_or_default();
    json_response(StatusCode::OK, json!({ "samples": ids }).to_string())
}

enum Failure {
    Request(RequestError),
    Unavailable,
    Internal(String),
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        match self {
            Failure::Request(e) => {
                let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::BAD_REQUEST);
                json_response(status, e.body())
            }
            Failure::Unavailable => json_response(
                StatusCode::SERVICE_UNAVAILABLE,
                json!({ "error": "no model is loaded", "fields": [] }).to_string(),
            ),
            Failure::Internal(msg) => {
                log::error!("generate failed: {msg}");
                json_response(
                    StatusCode::INTERNAL_SERVER_ERROR,
                    json!({ "error": msg, "fields": [] }).to_string(),
                )
            }
        }
    }
}

async fn generate(State(s): State<AppState>, body: Bytes) -> Result<Response, Failure> {
    let model = s.model.clone().ok_or(Failure::Unavailable)?;
    let req = GenerateRequest::parse(&body).map_err(Failure::Request)?;
    req.validate(&model.model.cfg, false).map_err(Failure::Request)?;
    let dataset = s.dataset.clone();
    tokio::task::spawn_blocking(move || run_generate(&model, dataset.as_deref(), &req))
        .await
        .map_err(|e| Failure::Internal(e.to_string()))?
}

fn run_generate(m: &LoadedModel, dataset: Option<&Dataset>, req: &GenerateRequest) -> Result<Response, Failure> {
    let image = match (&req.sample_id, req.inline_image().map_err(Failure::Request)?) {
        (_, Some(img)) => img,
        (Some(id), None) => {
            let unknown = || Failure::Request(RequestError::UnknownSample(id.clone()));
            let d = dataset.ok_or_else(unknown)?;
            let rec = d.records.get(id).ok_or_else(unknown)?;
            load_sample(&d.dir, rec).map_err(|e| Failure::Internal(e.to_string()))?.image
        }
        (None, None) => return Err(Failure::Internal("request has no image".into())),
    };
    let g = sample(&m.model, &m.schedule, &image, &req.constraints(), &req.options())
        .map_err(|e| Failure::Internal(e.to_string()))?;
    let resp = GenerateResponse::new(req, g.layout, g.trajectory);
    let body = serde_json::to_vec(&resp).map_err(|e| Failure::Internal(e.to_string()))?;
    Ok(json_response(StatusCode::OK, body))
}
