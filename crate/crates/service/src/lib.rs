//! Stateless HTTP scoring service.
//!
//! Routes:
//! - `GET /videos` lists the served videos (503 until loading finishes).
//! - `POST /score` scores one video under an inline definition.
//! - `GET /videos/{id}/labels` returns step-level ground truth (204 when absent).
//!
//! State is immutable once loaded, so concurrent requests never interact.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use openvad::data::{load_manifest, FeatureRepository};
use openvad::error::{Error, Result};
use openvad::model::Checkpoint;
use openvad::types::{AnomalyDefinition, FeatureSequence, Split, VideoRecord};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

/// Everything a request may read.
pub struct ServiceData {
    checkpoint: Checkpoint,
    config_hash: String,
    sequences: BTreeMap<String, FeatureSequence>,
    records: BTreeMap<String, VideoRecord>,
}

impl ServiceData {
    /// Serve `sequences`; `records` supply ground truth where present.
    pub fn new(checkpoint: Checkpoint, sequences: Vec<FeatureSequence>, records: Vec<VideoRecord>) -> Result<Self> {
        let dim = checkpoint.model.arch.embed_dim;
        if let Some(s) = sequences.iter().find(|s| s.dim() != dim) {
            return Err(Error::Invalid(format!(
                "{}: feature width {} but checkpoint expects {dim}",
                s.video_id,
                s.dim()
            )));
        }
        Ok(ServiceData {
            config_hash: checkpoint.config_hash(),
            checkpoint,
            sequences: sequences.into_iter().map(|s| (s.video_id.clone(), s)).collect(),
            records: records.into_iter().map(|r| (r.video_id.clone(), r)).collect(),
        })
    }

    /// Serve `checkpoint` over a repository. With a manifest the served set is
    /// its rows (restricted to `split` when given); otherwise every repository video.
    pub fn load(checkpoint: Checkpoint, features: &Path, manifest: Option<&Path>, split: Option<Split>) -> Result<Self> {
        let repo = FeatureRepository::open(features)?;
        let records: Vec<VideoRecord> = match manifest {
            Some(m) => load_manifest(m)?
                .into_iter()
                .filter(|r| split.is_none_or(|s| r.split == s))
                .collect(),
            None => Vec::new(),
        };
        let sequences = if manifest.is_some() {
            records
                .iter()
                .map(|r| repo.read_features(&r.video_id))
                .collect::<Result<Vec<_>>>()?
        } else {
            repo.load_all()?
        };
        ServiceData::new(checkpoint, sequences, records)
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }
}

/// Shared handle; empty until loading completes.
#[derive(Clone, Default)]
pub struct AppState(Arc<OnceLock<ServiceData>>);

impl AppState {
    pub fn pending() -> Self {
        AppState::default()
    }

    pub fn ready(data: ServiceData) -> Self {
        let s = AppState::default();
        s.install(data);
        s
    }

    /// Publish loaded data; later calls are ignored.
    pub fn install(&self, data: ServiceData) {
        if self.0.set(data).is_err() {
            log::warn!("service data already installed");
        }
    }

    fn get(&self) -> std::result::Result<&ServiceData, ApiError> {
        self.0
            .get()
            .ok_or_else(|| ApiError(StatusCode::SERVICE_UNAVAILABLE, "repository still loading".into()))
    }
}

#[derive(Debug)]
struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        json_response(self.0, &serde_json::json!({ "error": self.1 }))
    }
}

fn json_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    match serde_json::to_vec(body) {
        Ok(bytes) => (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct VideoEntry {
    pub video_id: String,
    #[serde(rename = "L")]
    pub len: usize,
    pub duration_s: f64,
    pub has_frame_labels: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub video_id: String,
    pub definition: serde_json::Value,
}

/// Per-class summary of the similarity matrix over time.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassSummary {
    pub class_id: String,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ScoreResponse {
    pub video_id: String,
    pub frame_scores: Vec<f64>,
    /// Frames per feature step and frame rate, for placing steps on a time axis.
    pub stride_frames: u32,
    pub fps: f32,
    pub y_mul: Vec<ClassSummary>,
    pub video_class_probs: Vec<f64>,
    pub definition_echo: AnomalyDefinition,
    pub config_hash: String,
}

async fn list_videos(State(state): State<AppState>) -> std::result::Result<Response, ApiError> {
    let data = state.get()?;
    let list: Vec<VideoEntry> = data
        .sequences
        .values()
        .map(|s| VideoEntry {
            video_id: s.video_id.clone(),
            len: s.len(),
            duration_s: s.duration_s(),
            has_frame_labels: data.records.get(&s.video_id).is_some_and(|r| r.frame_labels.is_some()),
        })
        .collect();
    Ok(json_response(StatusCode::OK, &list))
}

async fn video_labels(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> std::result::Result<Response, ApiError> {
    let data = state.get()?;
    let seq = data
        .sequences
        .get(&id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown video `{id}`")))?;
    match data.records.get(&id).and_then(|r| r.frame_labels.as_deref()) {
        Some(labels) => Ok(json_response(StatusCode::OK, &step_labels(labels, seq))),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

/// Labels at feature-step granularity: frame-level arrays are reduced by
/// taking the maximum over the frames each step covers.
fn step_labels(labels: &[u8], seq: &FeatureSequence) -> Vec<u8> {
    let l = seq.len();
    if labels.len() == l {
        return labels.to_vec();
    }
    let stride = seq.stride_frames.max(1) as usize;
    let mut out = vec![0u8; l];
    for (f, &v) in labels.iter().enumerate() {
        let t = (f / stride).min(l - 1);
        out[t] = out[t].max(v);
    }
    out
}

fn unprocessable(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::UNPROCESSABLE_ENTITY, msg.into())
}

async fn score(State(state): State<AppState>, body: Bytes) -> std::result::Result<Response, ApiError> {
    state.get()?;
    let req: ScoreRequest = serde_json::from_slice(&body).map_err(|e| unprocessable(format!("request: {e}")))?;
    tokio::task::spawn_blocking(move || score_blocking(state.get()?, req))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn score_blocking(data: &ServiceData, req: ScoreRequest) -> std::result::Result<Response, ApiError> {
    let seq = data
        .sequences
        .get(&req.video_id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown video `{}`", req.video_id)))?;
    let definition: AnomalyDefinition =
        serde_json::from_value(req.definition).map_err(|e| unprocessable(format!("definition: {e}")))?;
    let ckpt = &data.checkpoint;
    let result = ckpt
        .model
        .score(seq, &definition, &ckpt.text, ckpt.config.language_guided)
        .map_err(|e| match e {
            Error::Invalid(m) => unprocessable(format!("definition: {m}")),
            other => ApiError(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        })?;
    let (l, c) = result.y_mul.shape();
    let y_mul = (0..c)
        .map(|j| {
            let col: Vec<f64> = (0..l).map(|t| result.y_mul.get(t, j)).collect();
            ClassSummary {
                class_id: definition.classes()[j].class_id.clone(),
                min: col.iter().copied().fold(f64::INFINITY, f64::min),
                mean: col.iter().sum::<f64>() / l as f64,
                max: col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let response = ScoreResponse {
        video_id: req.video_id,
        frame_scores: result.frame_scores(),
        stride_frames: seq.stride_frames,
        fps: seq.fps,
        y_mul,
        video_class_probs: result.video_class_probs,
        definition_echo: definition,
        config_hash: data.config_hash.clone(),
    };
    Ok(json_response(StatusCode::OK, &response))
}

/// Routes with CORS for `origin` (any origin when `None`).
pub fn router(state: AppState, origin: Option<HeaderValue>) -> Router {
    let cors = CorsLayer::new()
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([header::CONTENT_TYPE])
        .allow_origin(match origin {
            Some(o) => AllowOrigin::exact(o),
            None => AllowOrigin::any(),
        });
    Router::new()
        .route("/videos", get(list_videos))
        .route("/videos/{id}/labels", get(video_labels))
        .route("/score", post(score))
        .layer(cors)
        .with_state(state)
}

/// Bind `addr`, answer 503 while `load` runs, then serve until `shutdown`
/// resolves. A failed load stops the server with its error.
pub async fn serve<F>(
    addr: SocketAddr,
    origin: Option<HeaderValue>,
    load: F,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<()>
where
    F: FnOnce() -> Result<ServiceData> + Send + 'static,
{
    let state = AppState::pending();
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let (fail_tx, fail_rx) = tokio::sync::oneshot::channel::<Error>();
    let loader_state = state.clone();
    tokio::task::spawn_blocking(move || match load() {
        Ok(data) => {
            log::info!("loaded {} videos (config {})", data.sequences.len(), data.config_hash);
            loader_state.install(data);
        }
        Err(e) => {
            let _ = fail_tx.send(e);
        }
    });
    let failure = Arc::new(std::sync::Mutex::new(None));
    let slot = failure.clone();
    let stop = async move {
        tokio::select! {
            _ = shutdown => {}
            r = fail_rx => if let Ok(e) = r {
                *slot.lock().unwrap() = Some(e);
            },
        }
    };
    axum::serve(listener, router(state, origin))
        .with_graceful_shutdown(stop)
        .await?;
    let err = failure.lock().unwrap().take();
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
