//! HTTP/JSON front end for the design calculators and the simulation
//! harness. All routes live under `/v1`; request bodies must be
//! `application/json`.

pub mod api;
pub mod error;
pub mod jobs;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{FromRequest, Path, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

use api::*;
use error::{ApiError, FieldError};
use jobs::JobStore;

/// The OpenAPI document served at `/v1/openapi.json`.
pub const OPENAPI: &str = include_str!("../openapi.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Per-scenario replication cap for `/v1/simulate`.
    pub max_replications: usize,
    pub max_scenarios: usize,
    /// Jobs kept in memory, finished or not.
    pub job_capacity: usize,
    /// Jobs allowed to run at once.
    pub workers: usize,
    /// Rayon threads per job; 0 uses the global pool.
    pub threads_per_job: usize,
    /// Allowed CORS origin; `None` allows any origin.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            max_replications: 1000,
            max_scenarios: 120,
            job_capacity: 64,
            workers: 2,
            threads_per_job: 0,
            cors_origin: None,
        }
    }
}

#[derive(Debug)]
pub struct AppState {
    pub config: ServiceConfig,
    pub jobs: Arc<JobStore>,
}

type Shared = State<Arc<AppState>>;

/// JSON body extractor: 415 without a JSON content type, 400 with the
/// offending field path when deserialization fails.
pub struct ApiJson<T>(pub T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let json = req
            .headers()
            .get(header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.split(';').next())
            .is_some_and(|v| {
                let v = v.trim();
                v.eq_ignore_ascii_case("application/json") || v.ends_with("+json")
            });
        if !json {
            return Err(ApiError::UnsupportedMediaType);
        }
        let bytes = Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::field("body", e.body_text()))?;
        parse_body(&bytes).map(ApiJson)
    }
}

fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "body".to_string() } else { path };
        ApiError::Validation(vec![FieldError {
            field,
            message: e.into_inner().to_string(),
        }])
    })?;
    de.end().map_err(|e| ApiError::field("body", e.to_string()))?;
    Ok(value)
}

async fn power(ApiJson(input): ApiJson<DesignInput>) -> Result<Json<PowerResponse>, ApiError> {
    input.power().map(Json)
}

async fn sample_size(ApiJson(input): ApiJson<DesignInput>) -> Result<Json<SampleSizeResponse>, ApiError> {
    input.sample_size().map(Json)
}

async fn design_effect_route(ApiJson(input): ApiJson<DesignInput>) -> Result<Json<DesignEffectResponse>, ApiError> {
    input.design_effect().map(Json)
}

async fn allocation(ApiJson(input): ApiJson<DesignInput>) -> Result<Json<AllocationResponse>, ApiError> {
    input.allocation().map(Json)
}

async fn validate_icc(ApiJson(req): ApiJson<ValidateRequest>) -> Result<Json<ValidateResponse>, ApiError> {
    req.evaluate().map(Json)
}

async fn grid(ApiJson(req): ApiJson<GridRequest>) -> Result<Json<GridResponse>, ApiError> {
    tokio::task::spawn_blocking(move || req.evaluate())
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map(Json)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub job_id: String,
    pub state: JobState,
}

async fn simulate(State(app): Shared, ApiJson(req): ApiJson<SimulateRequest>) -> Result<Response, ApiError> {
    let cfg = &app.config;
    if req.scenarios.is_empty() {
        return Err(ApiError::field("scenarios", "at least one scenario is required"));
    }
    if req.scenarios.len() > cfg.max_scenarios {
        return Err(ApiError::domain(format!(
            "{} scenarios exceed the cap {}",
            req.scenarios.len(),
            cfg.max_scenarios
        )));
    }
    for (i, s) in req.scenarios.iter().enumerate() {
        if s.replications > cfg.max_replications {
            return Err(ApiError::domain(format!(
                "scenario {i}: {} replications exceed the cap {}",
                s.replications, cfg.max_replications
            )));
        }
        s.validate().map_err(|e| match ApiError::from(e) {
            ApiError::Validation(fields) => ApiError::Validation(
                fields
                    .into_iter()
                    .map(|f| FieldError {
                        field: format!("scenarios[{i}].{}", f.field),
                        message: f.message,
                    })
                    .collect(),
            ),
            other => other,
        })?;
    }
    let status = app.jobs.submit(req.scenarios, req.master_seed)?;
    let body = SubmitResponse {
        job_id: status.id,
        state: status.state,
    };
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

async fn job(State(app): Shared, Path(id): Path<String>) -> Result<Json<JobStatus>, ApiError> {
    app.jobs
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::NotFound(format!("no job `{id}`")))
}

async fn openapi() -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/json")], OPENAPI)
}

async fn fallback() -> ApiError {
    ApiError::NotFound("no such route".into())
}

fn cors(origin: Option<&str>) -> CorsLayer {
    let layer = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    match origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(o) => layer.allow_origin(o),
        None => layer.allow_origin(AllowOrigin::any()),
    }
}

pub fn router(config: ServiceConfig) -> Router {
    let jobs = Arc::new(JobStore::new(config.job_capacity, config.workers, config.threads_per_job));
    let cors = cors(config.cors_origin.as_deref());
    let state = Arc::new(AppState { config, jobs });
    Router::new()
        .route("/v1/power", post(power))
        .route("/v1/sample-size", post(sample_size))
        .route("/v1/design-effect", post(design_effect_route))
        .route("/v1/allocation", post(allocation))
        .route("/v1/icc/validate", post(validate_icc))
        .route("/v1/sensitivity-grid", post(grid))
        .route("/v1/simulate", post(simulate))
        .route("/v1/jobs/{id}", get(job))
        .route("/v1/openapi.json", get(openapi))
        .fallback(fallback)
        .layer(cors)
        .with_state(state)
}

#[derive(Debug)]
pub enum ServeError {
    Bind { addr: String, source: std::io::Error },
    Io(std::io::Error),
}

impl std::fmt::Display for ServeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ServeError::Bind { addr, source } if source.kind() == std::io::ErrorKind::AddrInUse => {
                write!(f, "cannot listen on {addr}: address already in use")
            }
            ServeError::Bind { addr, source } => write!(f, "cannot listen on {addr}: {source}"),
            ServeError::Io(e) => write!(f, "server error: {e}"),
        }
    }
}

impl std::error::Error for ServeError {}

/// Binds the configured address. Port 0 picks a free port.
pub async fn bind(config: &ServiceConfig) -> Result<tokio::net::TcpListener, ServeError> {
    let addr = format!("{}:{}", config.host, config.port);
    tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })
}

/// Serves until the process is stopped; `on_ready` receives the bound address.
pub async fn serve(config: ServiceConfig, on_ready: impl FnOnce(SocketAddr)) -> Result<(), ServeError> {
    let listener = bind(&config).await?;
    on_ready(listener.local_addr().map_err(ServeError::Io)?);
    axum::serve(listener, router(config)).await.map_err(ServeError::Io)
}
