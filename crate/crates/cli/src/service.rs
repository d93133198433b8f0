//! HTTP scoring service.
//!
//! `POST /v1/score`, `GET /v1/healthz`, `GET /v1/bundle`, `POST /v1/reload`.
//! The bundle sits behind an [`ArcSwap`]; a reload swaps the whole bundle
//! atomically and in-flight requests finish on the one they loaded.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use arc_swap::ArcSwap;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use whiteguard_core::storage::manifest_for;
use whiteguard_core::{load_bundle, score_online, ComplianceVerdict, Error, GuardBundle, LayerActivations};

use crate::error::{CliError, CliResult};

const MAX_BODY_BYTES: usize = 64 << 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    /// Layer index (1-based) to activation vector.
    pub activations: BTreeMap<usize, Vec<f64>>,
    #[serde(default)]
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    #[serde(flatten)]
    pub verdict: ComplianceVerdict,
    pub model_id: String,
    pub format_version: u32,
}

pub struct ServiceState {
    bundle: ArcSwap<GuardBundle>,
    source: Option<PathBuf>,
}

impl ServiceState {
    pub fn new(bundle: GuardBundle, source: Option<PathBuf>) -> Self {
        Self {
            bundle: ArcSwap::from_pointee(bundle),
            source,
        }
    }

    pub fn current(&self) -> Arc<GuardBundle> {
        self.bundle.load_full()
    }

    /// Re-reads the bundle file and swaps it in; the old bundle stays live
    /// if the file does not load.
    pub fn reload(&self) -> CliResult<Arc<GuardBundle>> {
        let path = self
            .source
            .as_ref()
            .ok_or_else(|| CliError::config("service was started without a bundle file"))?;
        let bundle = Arc::new(load_bundle(path).map_err(|e| CliError::from(e).with_path(path))?);
        self.bundle.store(bundle.clone());
        Ok(bundle)
    }
}

struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.kind, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = match &e {
            Error::DimensionMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "dimension_mismatch"),
            Error::MissingLayer(_) => (StatusCode::UNPROCESSABLE_ENTITY, "missing_layer"),
            Error::UnknownCategory(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_category"),
            Error::Routing(_) => (StatusCode::UNPROCESSABLE_ENTITY, "routing"),
            Error::NonFiniteInput { .. } => (StatusCode::BAD_REQUEST, "non_finite"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError {
            status,
            kind,
            message: e.to_string(),
        }
    }
}

fn summary(bundle: &GuardBundle) -> serde_json::Value {
    json!({
        "model_id": bundle.model_id,
        "format_version": bundle.format_version,
        "created_at": bundle.created_at.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true),
        "profiles": bundle.profiles.len(),
    })
}

async fn score(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<ScoreResponse>, ApiError> {
    let request: ScoreRequest = serde_json::from_slice(&body).map_err(|e| ApiError {
        status: StatusCode::BAD_REQUEST,
        kind: "malformed_request",
        message: e.to_string(),
    })?;
    let bundle = state.current();
    let activations = LayerActivations(request.activations);
    let verdict = score_online(&bundle, &activations, request.category.as_deref())?;
    Ok(Json(ScoreResponse {
        verdict,
        model_id: bundle.model_id.clone(),
        format_version: bundle.format_version,
    }))
}

async fn healthz(State(state): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    let mut body = summary(&state.current());
    body["status"] = json!("ok");
    Json(body)
}

async fn bundle_manifest(State(state): State<Arc<ServiceState>>) -> Result<Json<serde_json::Value>, ApiError> {
    let (manifest, _) = manifest_for(&state.current())?;
    Ok(Json(serde_json::to_value(manifest).expect("manifest serializes")))
}

async fn reload(State(state): State<Arc<ServiceState>>) -> Result<Json<serde_json::Value>, ApiError> {
    let s = state.clone();
    let result = tokio::task::spawn_blocking(move || s.reload())
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal",
            message: e.to_string(),
        })?;
    match result {
        Ok(bundle) => {
            tracing::info!(model_id = %bundle.model_id, "bundle reloaded");
            let mut body = summary(&bundle);
            body["status"] = json!("reloaded");
            Ok(Json(body))
        }
        Err(e) => {
            tracing::warn!(error = %e, "reload failed, keeping current bundle");
            Err(ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                kind: "reload_failed",
                message: e.message,
            })
        }
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/score", post(score))
        .route("/v1/healthz", get(healthz))
        .route("/v1/bundle", get(bundle_manifest))
        .route("/v1/reload", post(reload))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

#[cfg(unix)]
fn spawn_sighup_reload(state: Arc<ServiceState>) -> CliResult<()> {
    use tokio::signal::unix::{signal, SignalKind};
    let mut hangup = signal(SignalKind::hangup())
        .map_err(|e| CliError::new(crate::error::EXIT_FAILURE, "signal", e.to_string()))?;
    tokio::spawn(async move {
        while hangup.recv().await.is_some() {
            let s = state.clone();
            match tokio::task::spawn_blocking(move || s.reload()).await {
                Ok(Ok(b)) => tracing::info!(model_id = %b.model_id, "bundle reloaded on SIGHUP"),
                Ok(Err(e)) => tracing::warn!(error = %e, "SIGHUP reload failed, keeping current bundle"),
                Err(e) => tracing::error!(error = %e, "reload task panicked"),
            }
        }
    });
    Ok(())
}

/// Serves `bundle_path` on `listen` until Ctrl-C.
pub async fn serve(bundle_path: PathBuf, listen: SocketAddr) -> CliResult<()> {
    let bundle = load_bundle(&bundle_path).map_err(|e| CliError::from(e).with_path(&bundle_path))?;
    let state = Arc::new(ServiceState::new(bundle, Some(bundle_path)));
    #[cfg(unix)]
    spawn_sighup_reload(state.clone())?;
    let listener = tokio::net::TcpListener::bind(listen)
        .await
        .map_err(|e| CliError::new(crate::error::EXIT_FAILURE, "io", format!("bind {listen}: {e}")))?;
    let addr = listener.local_addr().unwrap_or(listen);
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::new(crate::error::EXIT_FAILURE, "io", e.to_string()))
}
