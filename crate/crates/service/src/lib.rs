//! HTTP front end for the reward engine.
//!
//! | method | path                | body                                              |
//! |--------|---------------------|---------------------------------------------------|
//! | POST   | `/v1/eara`          | `{nec_inputs, T, r_global?, beta?}`               |
//! | POST   | `/v1/advantages`    | `{groups, epsilon?}`                              |
//! | POST   | `/v1/rollout/score` | `{r_eara, r_fmt, r_chunk, r_comp, weights?}`      |
//! | GET    | `/health`           |                                                   |
//!
//! Malformed JSON and unknown fields answer 400, numerically inconsistent
//! requests 422, a non-JSON content type 415, and saturation 503. Handlers
//! are pure functions of the request body and the configured defaults.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use finemem_core::reward::{
    compute_eara, compute_nec, global_reward, grpo_advantages, is_conserved, total_step_rewards,
    EvidenceRecord, RewardError, RewardWeights, StepRewardBreakdown,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind_address: SocketAddr,
    pub max_concurrent_requests: usize,
    pub default_weights: RewardWeights,
    pub request_timeout: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind_address: SocketAddr::from(([127, 0, 0, 1], 8731)),
            max_concurrent_requests: 64,
            default_weights: RewardWeights::default(),
            request_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("max_concurrent_requests must be at least 1")]
    NoCapacity,
    #[error("default weights: {0}")]
    Weights(#[from] RewardError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.max_concurrent_requests == 0 {
            return Err(ServiceError::NoCapacity);
        }
        self.default_weights.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvidenceInput {
    #[serde(default)]
    pub question_index: Option<usize>,
    pub score: f64,
    pub retrieved_item_ids: Vec<u64>,
    pub origin_steps: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EaraRequest {
    pub nec_inputs: Vec<EvidenceInput>,
    #[serde(rename = "T", alias = "steps")]
    pub steps: usize,
    #[serde(default)]
    pub r_global: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EaraResponse {
    pub rewards: Vec<f64>,
    pub nec: Vec<f64>,
    pub r_global: f64,
    pub beta: f64,
    pub conserved: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvantagesRequest {
    pub groups: Vec<Vec<f64>>,
    #[serde(default)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantagesResponse {
    pub advantages: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub r_eara: Vec<f64>,
    pub r_fmt: Vec<f64>,
    pub r_chunk: Vec<f64>,
    pub r_comp: f64,
    #[serde(default)]
    pub weights: Option<RewardWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub per_step: Vec<StepRewardBreakdown>,
    pub weights: RewardWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            code,
            detail: detail.into(),
        }
    }

    fn unprocessable(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_dimensions", detail)
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }

    pub fn detail(&self) -> &str {
        &self.detail
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({}): {}", self.code, self.status.as_u16(), self.detail)
    }
}

impl From<RewardError> for ApiError {
    fn from(err: RewardError) -> Self {
        Self::unprocessable(err.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.code, "detail": self.detail });
        (self.status, Json(body)).into_response()
    }
}

fn parse_body<T: DeserializeOwned>(headers: &HeaderMap, body: &Bytes) -> Result<T, ApiError> {
    let content_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("");
    let essence = content_type.split(';').next().unwrap_or("").trim();
    if !essence.eq_ignore_ascii_case("application/json") {
        return Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "unsupported_media_type",
            format!("expected application/json, got `{content_type}`"),
        ));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "schema_violation", e.to_string()))
}

/// Request handling shared by the endpoints and by local callers that want
/// the exact same answers without HTTP.
pub mod engine {
    use super::*;

    pub fn eara(req: EaraRequest, defaults: &RewardWeights) -> Result<EaraResponse, ApiError> {
        if req.steps == 0 {
            return Err(ApiError::unprocessable("T must be at least 1"));
        }
        let beta = req.beta.unwrap_or(defaults.beta);
        let records: Vec<EvidenceRecord> = req
            .nec_inputs
            .into_iter()
            .enumerate()
            .map(|(j, e)| EvidenceRecord {
                question_index: e.question_index.unwrap_or(j),
                score: e.score,
                retrieved_item_ids: e.retrieved_item_ids,
                origin_steps: e.origin_steps,
            })
            .collect();
        let r_global = match req.r_global {
            Some(r) if (0.0..=1.0).contains(&r) => r,
            Some(r) => return Err(ApiError::unprocessable(format!("r_global {r} outside [0, 1]"))),
            None => {
                let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
                global_reward(&scores)?
            }
        };
        let nec = compute_nec(&records, req.steps)?;
        let rewards = compute_eara(&nec, r_global, beta)?;
        let conserved = is_conserved(&rewards, r_global);
        Ok(EaraResponse {
            rewards,
            nec,
            r_global,
            beta,
            conserved,
        })
    }

    pub fn advantages(req: AdvantagesRequest, defaults: &RewardWeights) -> Result<AdvantagesResponse, ApiError> {
        if req.groups.is_empty() {
            return Err(ApiError::unprocessable("groups must not be empty"));
        }
        let epsilon = req.epsilon.unwrap_or(defaults.epsilon);
        let advantages = req
            .groups
            .iter()
            .enumerate()
            .map(|(i, g)| grpo_advantages(g, epsilon).map_err(|e| ApiError::unprocessable(format!("group {i}: {e}"))))
            .collect::<Result<_, _>>()?;
        Ok(AdvantagesResponse { advantages })
    }

    pub fn score(req: ScoreRequest, defaults: &RewardWeights) -> Result<ScoreResponse, ApiError> {
        let weights = req.weights.unwrap_or(*defaults);
        weights.validate()?;
        let per_step = total_step_rewards(&req.r_eara, &req.r_fmt, &req.r_chunk, req.r_comp, &weights)?;
        Ok(ScoreResponse { per_step, weights })
    }
}

#[derive(Clone)]
struct AppState {
    config: Arc<ServiceConfig>,
    permits: Arc<Semaphore>,
    shutting_down: Arc<AtomicBool>,
}

async fn guard(State(state): State<AppState>, request: Request, next: Next) -> Response {
    let Ok(_permit) = state.permits.clone().try_acquire_owned() else {
        return ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "over_capacity", "too many concurrent requests")
            .into_response();
    };
    match tokio::time::timeout(state.config.request_timeout, next.run(request)).await {
        Ok(response) => response,
        Err(_) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "timeout", "request timed out").into_response(),
    }
}

async fn health(State(state): State<AppState>) -> Response {
    if state.shutting_down.load(Ordering::SeqCst) {
        let body = Health {
            status: "shutting_down".into(),
            version: VERSION.into(),
        };
        return (StatusCode::SERVICE_UNAVAILABLE, Json(body)).into_response();
    }
    Json(Health {
        status: "ok".into(),
        version: VERSION.into(),
    })
    .into_response()
}

async fn eara(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Json<EaraResponse>, ApiError> {
    let req = parse_body(&headers, &body)?;
    engine::eara(req, &state.config.default_weights).map(Json)
}

async fn advantages(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<AdvantagesResponse>, ApiError> {
    let req = parse_body(&headers, &body)?;
    engine::advantages(req, &state.config.default_weights).map(Json)
}

async fn score(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Json<ScoreResponse>, ApiError> {
    let req = parse_body(&headers, &body)?;
    engine::score(req, &state.config.default_weights).map(Json)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

/// Flips the service into shutdown mode; `/health` answers 503 afterwards.
#[derive(Clone)]
pub struct ShutdownHandle(Arc<AtomicBool>);

impl ShutdownHandle {
    pub fn begin(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_shutting_down(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

pub struct RewardService {
    state: AppState,
}

impl RewardService {
    pub fn new(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        Ok(Self {
            state: AppState {
                permits: Arc::new(Semaphore::new(config.max_concurrent_requests)),
                config: Arc::new(config),
                shutting_down: Arc::new(AtomicBool::new(false)),
            },
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.state.config
    }

    pub fn shutdown_handle(&self) -> ShutdownHandle {
        ShutdownHandle(Arc::clone(&self.state.shutting_down))
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/health", get(health))
            .route("/v1/eara", post(eara))
            .route("/v1/advantages", post(advantages))
            .route("/v1/rollout/score", post(score))
            .fallback(not_found)
            .layer(middleware::from_fn_with_state(self.state.clone(), guard))
            .with_state(self.state.clone())
    }

    /// Serves until `shutdown` resolves, then drains in-flight requests.
    pub async fn serve<F>(self, shutdown: F) -> Result<(), ServiceError>
    where
        F: Future<Output = ()> + Send + 'static,
    {
        let listener = tokio::net::TcpListener::bind(self.state.config.bind_address).await?;
        tracing::info!(address = %listener.local_addr()?, "reward service listening");
        let handle = self.shutdown_handle();
        axum::serve(listener, self.router())
            .with_graceful_shutdown(async move {
                shutdown.await;
                handle.begin();
                tracing::info!("shutting down");
            })
            .await?;
        Ok(())
    }
}

/// Resolves on Ctrl-C.
pub async fn ctrl_c() {
    if let Err(err) = tokio::signal::ctrl_c().await {
        tracing::error!(error = %err, "cannot listen for Ctrl-C");
        std::future::pending::<()>().await;
    }
}
