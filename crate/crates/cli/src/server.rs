//! HTTP front end. Requests read an immutable [`Recommender`] snapshot;
//! `/reload` builds a fresh one from disk and swaps it in, so in-flight
//! requests finish on the old artifacts.

use std::sync::{Arc, RwLock};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use triage_core::config::EngineConfig;
use triage_core::engine::{EngineError, Recommender};

#[derive(Clone)]
pub struct AppState {
    cfg: Arc<EngineConfig>,
    current: Arc<RwLock<Option<Arc<Recommender>>>>,
}

impl AppState {
    /// Tries to load the artifacts once. A service without them still
    /// starts and answers 503 until a successful reload.
    pub fn new(cfg: EngineConfig) -> Self {
        let current = match Recommender::load(&cfg) {
            Ok(r) => Some(Arc::new(r)),
            Err(e) => {
                tracing::warn!(error = %e, "starting without a model");
                None
            }
        };
        Self::with_recommender(cfg, current)
    }

    pub fn with_recommender(cfg: EngineConfig, rec: Option<Arc<Recommender>>) -> Self {
        Self {
            cfg: Arc::new(cfg),
            current: Arc::new(RwLock::new(rec)),
        }
    }

    fn snapshot(&self) -> Option<Arc<Recommender>> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

#[derive(Debug, Deserialize)]
pub struct RecommendRequest {
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    5
}

struct ApiError(StatusCode, String);

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let code = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        ApiError(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.0.is_server_error() {
            tracing::error!(status = self.0.as_u16(), error = %self.1, "request failed");
        }
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/recommend", post(recommend))
        .route("/health", get(health))
        .route("/reload", post(reload))
        .with_state(state)
}

async fn recommend(State(state): State<AppState>, body: Result<Json<RecommendRequest>, axum::extract::rejection::JsonRejection>) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.body_text()))?;
    let rec = state.snapshot().ok_or_else(|| ApiError(StatusCode::SERVICE_UNAVAILABLE, "model not loaded".into()))?;
    // inference and remote embedding calls block
    let out = tokio::task::spawn_blocking(move || rec.recommend(&req.title, &req.description, req.k))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(out).into_response())
}

async fn health(State(state): State<AppState>) -> Response {
    let rec = state.snapshot();
    Json(json!({
        "status": "ok",
        "ready": rec.is_some(),
        "labels": rec.as_ref().map(|r| r.labels().len()),
    }))
    .into_response()
}

async fn reload(State(state): State<AppState>) -> Result<Response, ApiError> {
    let cfg = state.cfg.clone();
    let fresh = tokio::task::spawn_blocking(move || Recommender::load(&cfg))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let labels = fresh.labels().len();
    *state.current.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(fresh));
    tracing::info!(labels, "reloaded artifacts");
    Ok(Json(json!({ "reloaded": true, "labels": labels })).into_response())
}

/// Binds and serves until ctrl-c.
pub async fn serve(cfg: EngineConfig) -> anyhow::Result<()> {
    let addr = cfg.serve.addr.clone();
    let state = tokio::task::spawn_blocking(move || AppState::new(cfg)).await?;
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
