//! JSON-over-HTTP service around a loaded [`ModelStack`].
//!
//! Endpoints:
//! - `GET /health` → `{status, version}`
//! - `GET /labels` → `{labels: [{id, name}]}`
//! - `POST /generate` `{label, length?, seed?, cfg?}` → `{frames, tokens, length, confidences}`
//! - `POST /edit` `{frames | tokens, label, task, spans?, seed?, cfg?}` → `{frames, tokens, preserved_positions}`
//! - `POST /tokenize` `{frames}` → `{token_grid}`
//! - `POST /detokenize` `{token_grid}` → `{frames}`
//!
//! Frames are in physical units, `length` counts frames and tokens are
//! base-layer ids. Failures answer `{error: {code, message}}`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bamm_core::TokenGrid;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use crate::data::{normalize, FrameMatrix, DEFAULT_FPS, DOWNSAMPLE};
use crate::decoder::{generate, DecodeConfig, ModelStack};
use crate::editor::{edit, EditRequest, EditSource, EditTask};
use crate::error::Error;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Shared, immutable service state.
pub struct ServiceState {
    pub stack: ModelStack,
    pub defaults: DecodeConfig,
    limit: Semaphore,
    next_error_id: AtomicU64,
}

impl ServiceState {
    pub fn new(stack: ModelStack, defaults: DecodeConfig, max_concurrent: usize) -> Arc<Self> {
        Arc::new(Self { stack, defaults, limit: Semaphore::new(max_concurrent.max(1)), next_error_id: AtomicU64::new(1) })
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/labels", get(labels))
        .route("/generate", post(generate_handler))
        .route("/edit", post(edit_handler))
        .route("/tokenize", post(tokenize_handler))
        .route("/detokenize", post(detokenize_handler))
        .with_state(state)
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(state: Arc<ServiceState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, code: "bad_request", message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": {"code": self.code, "message": self.message}}))).into_response()
    }
}

fn map_error(state: &ServiceState, e: Error) -> ApiError {
    match e {
        Error::Invalid(_) | Error::Config(_) | Error::Dimension(_) | Error::Core(_) => ApiError::bad_request(e.to_string()),
        other => {
            let id = state.next_error_id.fetch_add(1, Ordering::Relaxed);
            log::error!("request failed [{id}]: {other}");
            ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, code: "internal", message: format!("internal error (id {id})") }
        }
    }
}

/// Parses a body, reporting the JSON path of the offending field.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError::bad_request(format!("invalid field `{path}`: {}", e.inner()))
    })
}

async fn run_blocking<T: Send + 'static>(
    state: Arc<ServiceState>,
    f: impl FnOnce(&ServiceState) -> crate::Result<T> + Send + 'static,
) -> Result<T, ApiError> {
    let _permit = state.limit.acquire().await.map_err(|_| ApiError::bad_request("service shutting down"))?;
    let st = state.clone();
    match tokio::task::spawn_blocking(move || f(&st)).await {
        Ok(r) => r.map_err(|e| map_error(&state, e)),
        Err(join) => Err(map_error(&state, Error::Invalid(format!("worker panicked: {join}")))),
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "version": VERSION}))
}

async fn labels(State(state): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    let list: Vec<_> = state.stack.labels.iter().enumerate().map(|(i, n)| json!({"id": i, "name": n})).collect();
    Json(json!({"labels": list}))
}

/// Either a preset name or a full decode configuration.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum CfgSpec {
    Preset(String),
    Full(DecodeConfig),
}

fn decode_config(state: &ServiceState, cfg: Option<CfgSpec>, seed: Option<u64>) -> Result<DecodeConfig, ApiError> {
    let mut c = match cfg {
        None => state.defaults.clone(),
        Some(CfgSpec::Preset(name)) => DecodeConfig::preset(&name).map_err(|e| ApiError::bad_request(e.to_string()))?,
        Some(CfgSpec::Full(c)) => c,
    };
    if let Some(s) = seed {
        c.seed = s;
    }
    c.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(c)
}

fn frames_json(m: &FrameMatrix) -> Vec<Vec<f32>> {
    m.rows()
}

fn frames_from_json(rows: &[Vec<f32>], field: &str) -> Result<FrameMatrix, ApiError> {
    FrameMatrix::from_rows(rows, DEFAULT_FPS).map_err(|e| ApiError::bad_request(format!("invalid field `{field}`: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateBody {
    pub label: u32,
    /// Requested length in frames (a multiple of 4).
    #[serde(default)]
    pub length: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub cfg: Option<CfgSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub frames: Vec<Vec<f32>>,
    pub tokens: Vec<u32>,
    pub length: usize,
    pub confidences: Vec<f64>,
}

async fn generate_handler(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<GenerateResponse>, ApiError> {
    let req: GenerateBody = parse(&body)?;
    let cfg = decode_config(&state, req.cfg, req.seed)?;
    let tokens = match req.length {
        Some(f) if f == 0 || f % DOWNSAMPLE != 0 => {
            return Err(ApiError::bad_request(format!("invalid field `length`: {f} is not a positive multiple of {DOWNSAMPLE}")))
        }
        Some(f) => Some(f / DOWNSAMPLE),
        None => None,
    };
    let out = run_blocking(state, move |st| generate(&st.stack, req.label, &cfg, tokens)).await?;
    let (frames, trace) = out;
    Ok(Json(GenerateResponse {
        length: frames.num_frames(),
        frames: frames_json(&frames),
        tokens: trace.final_grid[0].clone(),
        confidences: trace.iter1_confidences,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditBody {
    #[serde(default)]
    pub frames: Option<Vec<Vec<f32>>>,
    #[serde(default)]
    pub tokens: Option<Vec<u32>>,
    pub label: u32,
    pub task: EditTask,
    /// Half-open frame ranges `[start, end)`.
    #[serde(default)]
    pub spans: Vec<[usize; 2]>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub cfg: Option<CfgSpec>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Preserved {
    pub position: usize,
    pub token: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditResponse {
    pub frames: Vec<Vec<f32>>,
    pub tokens: Vec<u32>,
    pub preserved_positions: Vec<Preserved>,
}

async fn edit_handler(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<EditResponse>, ApiError> {
    let req: EditBody = parse(&body)?;
    let config = decode_config(&state, req.cfg, req.seed)?;
    let source = match (req.frames, req.tokens) {
        (Some(f), None) => EditSource::Frames(frames_from_json(&f, "frames")?),
        (None, Some(t)) => EditSource::Tokens(t),
        _ => return Err(ApiError::bad_request("exactly one of `frames` and `tokens` is required")),
    };
    let spans = req.spans.iter().map(|[a, b]| *a..*b).collect();
    let er = EditRequest { source, label: req.label, task: req.task, spans, config };
    let out = run_blocking(state, move |st| edit(&st.stack, &er)).await?;
    Ok(Json(EditResponse {
        frames: frames_json(&out.frames),
        tokens: out.grid.row(0).to_vec(),
        preserved_positions: out.preserved.iter().map(|&(position, token)| Preserved { position, token }).collect(),
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizeBody {
    pub frames: Vec<Vec<f32>>,
}

async fn tokenize_handler(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: TokenizeBody = parse(&body)?;
    let frames = frames_from_json(&req.frames, "frames")?;
    let grid = run_blocking(state, move |st| {
        let norm = st.stack.tokenizer.norm().ok_or_else(|| Error::Config("tokenizer has no normalization stats".into()))?;
        let aligned = normalize(&frames, norm)?.align_to(DOWNSAMPLE, usize::MAX);
        st.stack.tokenizer.tokenize(&aligned)
    })
    .await?;
    Ok(Json(json!({"token_grid": grid.rows()})))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetokenizeBody {
    pub token_grid: Vec<Vec<u32>>,
}

async fn detokenize_handler(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: DetokenizeBody = parse(&body)?;
    let grid = TokenGrid::from_rows(&req.token_grid).map_err(|e| ApiError::bad_request(format!("invalid field `token_grid`: {e}")))?;
    let frames = run_blocking(state, move |st| {
        let (v, k) = (st.stack.tokenizer.stack().num_layers(), st.stack.tokenizer.stack().codebook_size() as u32);
        if grid.layers() > v || grid.is_empty() || grid.rows().iter().flatten().any(|&id| id >= k) {
            return Err(Error::Invalid(format!("token_grid must have 1..={v} non-empty rows of ids below {k}")));
        }
        st.stack.grid_to_frames(&grid)
    })
    .await?;
    Ok(Json(json!({"frames": frames_json(&frames)})))
}
