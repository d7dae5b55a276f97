//! HTTP service for blind annotation.
//!
//! | Route | |
//! |---|---|
//! | `GET /api/queue/next` | next item for the caller, or `null` when none is left |
//! | `POST /api/annotations` | submit a record for a leased item |
//! | `GET /api/progress` | `{total, annotated, inconclusive_so_far, remaining}` |
//! | `GET /api/export` | accepted records as JSONL |
//! | `GET /api/schema` | criteria catalog |
//!
//! Every `/api` route needs `Authorization: Bearer <token>`. Errors are
//! `{"error": code, "detail": text}`.

pub mod queue;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{FromRequestParts, Request, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use pgrisk::annotation::{BlindItem, CriteriaSchema};
use pgrisk::corpus::read_jsonl;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub use queue::{
    Accepted, Assignment, Progress, Queue, QueueError, Submission, DEFAULT_LEASE_SECONDS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    /// Blind export (JSONL of `{id, text}`), served in file order.
    pub queue: PathBuf,
    /// Token to annotator id.
    pub tokens: BTreeMap<String, String>,
    /// Directory for the append-only record and lease logs.
    pub data_dir: PathBuf,
    #[serde(default = "default_lease")]
    pub lease_seconds: i64,
    /// Static UI bundle served at `/`.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
}

fn default_lease() -> i64 {
    DEFAULT_LEASE_SECONDS
}

impl ServiceConfig {
    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<ServiceConfig, String> {
        let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg: ServiceConfig =
            serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.queue = base.join(&cfg.queue);
        cfg.data_dir = base.join(&cfg.data_dir);
        cfg.static_dir = cfg.static_dir.map(|d| base.join(d));
        if cfg.tokens.is_empty() {
            return Err("at least one annotator token is required".into());
        }
        if cfg.lease_seconds <= 0 {
            return Err("lease_seconds must be positive".into());
        }
        Ok(cfg)
    }
}

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

#[derive(Clone)]
pub struct AppState {
    queue: Arc<RwLock<Queue>>,
    tokens: Arc<BTreeMap<String, String>>,
    clock: Clock,
}

impl AppState {
    pub fn new(queue: Queue, tokens: BTreeMap<String, String>, clock: Clock) -> AppState {
        AppState {
            queue: Arc::new(RwLock::new(queue)),
            tokens: Arc::new(tokens),
            clock,
        }
    }

    pub fn from_config(cfg: &ServiceConfig) -> Result<AppState, String> {
        let items: Vec<BlindItem> = read_jsonl(&cfg.queue).map_err(|e| e.to_string())?;
        let queue = Queue::open(
            items,
            CriteriaSchema::standard(),
            cfg.lease_seconds,
            &cfg.data_dir,
        )
        .map_err(|e| e.to_string())?;
        Ok(AppState::new(queue, cfg.tokens.clone(), Arc::new(Utc::now)))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: String,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, detail: impl Into<String>) -> ApiError {
        ApiError {
            status,
            code: code.into(),
            detail: detail.into(),
        }
    }
}

impl From<QueueError> for ApiError {
    fn from(e: QueueError) -> ApiError {
        let status = match e {
            QueueError::UnknownPost(_) => StatusCode::NOT_FOUND,
            QueueError::Conflict(_) | QueueError::LeaseExpired(_) | QueueError::NotLeased(_) => {
                StatusCode::CONFLICT
            }
            QueueError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            QueueError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.code(), e.detail())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({"error": self.code, "detail": self.detail})),
        )
            .into_response()
    }
}

/// The annotator behind the request's bearer token.
pub struct Annotator(pub String);

impl FromRequestParts<AppState> for Annotator {
    type Rejection = ApiError;

    async fn from_request_parts(
        parts: &mut Parts,
        state: &AppState,
    ) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| {
                ApiError::new(
                    StatusCode::UNAUTHORIZED,
                    "unauthorized",
                    "missing bearer token",
                )
            })?;
        state
            .tokens
            .get(token.trim())
            .map(|a| Annotator(a.clone()))
            .ok_or_else(|| {
                ApiError::new(
                    StatusCode::UNAUTHORIZED,
                    "unauthorized",
                    "unknown annotator token",
                )
            })
    }
}

fn poisoned() -> ApiError {
    ApiError::new(
        StatusCode::INTERNAL_SERVER_ERROR,
        "internal",
        "queue state unavailable",
    )
}

async fn next_item(
    State(state): State<AppState>,
    Annotator(who): Annotator,
) -> Result<Json<Option<Assignment>>, ApiError> {
    let now = (state.clock)();
    let mut q = state.queue.write().map_err(|_| poisoned())?;
    Ok(Json(q.next_item(&who, now)?))
}

async fn submit(
    State(state): State<AppState>,
    Annotator(who): Annotator,
    body: axum::body::Bytes,
) -> Result<(StatusCode, Json<Accepted>), ApiError> {
    let sub: Submission = serde_json::from_slice(&body).map_err(|e| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "validation",
            e.to_string(),
        )
    })?;
    let now = (state.clock)();
    let mut q = state.queue.write().map_err(|_| poisoned())?;
    Ok((StatusCode::CREATED, Json(q.submit(&who, sub, now)?)))
}

async fn progress(State(state): State<AppState>, _: Annotator) -> Result<Json<Progress>, ApiError> {
    Ok(Json(state.queue.read().map_err(|_| poisoned())?.progress()))
}

async fn export(State(state): State<AppState>, _: Annotator) -> Result<Response, ApiError> {
    let body = state.queue.read().map_err(|_| poisoned())?.export_jsonl();
    Ok((
        [(header::CONTENT_TYPE, "application/x-ndjson; charset=utf-8")],
        body,
    )
        .into_response())
}

async fn schema(
    State(state): State<AppState>,
    _: Annotator,
) -> Result<Json<CriteriaSchema>, ApiError> {
    Ok(Json(
        state.queue.read().map_err(|_| poisoned())?.schema().clone(),
    ))
}

async fn api_not_found(_: Request) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

const PLACEHOLDER: &str = "<!doctype html><meta charset=utf-8><title>annotation</title>\
<p>Annotation API is running. Configure <code>static_dir</code> to serve the annotation UI.</p>";

pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/queue/next", get(next_item))
        .route("/annotations", post(submit))
        .route("/progress", get(progress))
        .route("/export", get(export))
        .route("/schema", get(schema))
        .fallback(api_not_found);
    let app = Router::new().nest("/api", api);
    let app = match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.route("/", get(|| async { Html(PLACEHOLDER) })),
    };
    app.with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(cfg: ServiceConfig, addr: SocketAddr) -> Result<(), String> {
    let state = AppState::from_config(&cfg)?;
    let app = router(state, cfg.static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| format!("{addr}: {e}"))?;
    axum::serve(listener, app).await.map_err(|e| e.to_string())
}
