use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::api::{
    compress_response, explain_response, generate_response, ApiError, CompressRequest,
    ExplainRequest, GenerateRequest,
};
use crate::config::ServerConfig;
use crate::registry::Registry;

pub struct AppState {
    pub registry: Registry,
    pub timeout: Duration,
    pub max_parallelism: usize,
    pub api_key: Option<String>,
    jobs: Semaphore,
}

impl AppState {
    pub fn new(registry: Registry, cfg: &ServerConfig) -> Self {
        Self {
            registry,
            timeout: Duration::from_secs(cfg.timeout_secs),
            max_parallelism: cfg.max_parallelism,
            api_key: cfg.api_key.clone(),
            jobs: Semaphore::new(cfg.max_concurrent_jobs.max(1)),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let mut resp = (status, Json(self.body())).into_response();
        if let Some(ra) = self.retry_after {
            let secs = ra.as_secs_f64().ceil() as u64;
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        resp
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// Runs blocking model work off the async runtime under the job limit and
/// the request timeout.
async fn run_job<T, F>(state: Arc<AppState>, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
{
    let timeout = state.timeout;
    let work = async move {
        let _permit = state.jobs.acquire().await.expect("semaphore never closed");
        let inner = state.clone();
        tokio::task::spawn_blocking(move || f(&inner)).await
    };
    match tokio::time::timeout(timeout, work).await {
        Err(_) => ApiError::timeout(timeout.as_secs()).into_response(),
        Ok(Err(join)) => ApiError {
            status: 500,
            kind: "internal",
            message: format!("worker failed: {join}"),
            retry_after: None,
        }
        .into_response(),
        Ok(Ok(Err(e))) => e.into_response(),
        Ok(Ok(Ok(v))) => Json(v).into_response(),
    }
}

async fn explain(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: ExplainRequest = match parse(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    run_job(state, move |s| {
        explain_response(&s.registry, &req, s.max_parallelism)
    })
    .await
}

async fn generate(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: GenerateRequest = match parse(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    run_job(state, move |s| generate_response(&s.registry, &req)).await
}

async fn compress(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: CompressRequest = match parse(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    run_job(state, move |s| {
        compress_response(&s.registry, &req, s.max_parallelism)
    })
    .await
}

async fn models(State(state): State<Arc<AppState>>) -> Response {
    Json(state.registry.models()).into_response()
}

async fn health() -> Response {
    Json(serde_json::json!({"status": "ok"})).into_response()
}

fn authorized(headers: &HeaderMap, key: &str) -> bool {
    let bearer = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    let plain = headers.get("x-api-key").and_then(|v| v.to_str().ok());
    bearer == Some(key) || plain == Some(key)
}

async fn require_key(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    match &state.api_key {
        Some(key) if req.uri().path() != "/api/health" && !authorized(req.headers(), key) => {
            ApiError {
                status: 401,
                kind: "unauthorized",
                message: "missing or wrong API key".into(),
                retry_after: None,
            }
            .into_response()
        }
        _ => next.run(req).await,
    }
}

pub fn router(state: Arc<AppState>, cors_origins: &[String]) -> Router {
    let mut app = Router::new()
        .route("/api/explain", post(explain))
        .route("/api/generate", post(generate))
        .route("/api/compress", post(compress))
        .route("/api/models", get(models))
        .route("/api/health", get(health))
        .layer(middleware::from_fn_with_state(state.clone(), require_key))
        .with_state(state);
    let origins: Vec<HeaderValue> = cors_origins
        .iter()
        .filter_map(|o| HeaderValue::from_str(o).ok())
        .collect();
    if !origins.is_empty() {
        app = app.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::list(origins))
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]),
        );
    }
    app
}

/// Binds and serves `state` until the process is interrupted.
pub async fn serve(state: Arc<AppState>, cfg: &ServerConfig) -> Result<(), String> {
    let app = router(state, &cfg.cors_origins);
    let listener = TcpListener::bind(&cfg.bind)
        .await
        .map_err(|e| format!("cannot bind {}: {e}", cfg.bind))?;
    let addr: SocketAddr = listener.local_addr().map_err(|e| e.to_string())?;
    tracing::info!("listening on http://{addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| e.to_string())
}

/// Builds the registry and serves on a fresh multi-threaded runtime.
///
/// Remote backends hold blocking HTTP clients, which must be created and
/// dropped outside the async runtime.
pub fn serve_blocking(cfg: ServerConfig) -> Result<(), String> {
    let registry = Registry::from_config(&cfg).map_err(|e| e.to_string())?;
    let state = Arc::new(AppState::new(registry, &cfg));
    let rt = tokio::runtime::Runtime::new().map_err(|e| format!("cannot start runtime: {e}"))?;
    let result = rt.block_on(serve(state.clone(), &cfg));
    drop(rt);
    drop(state);
    result
}
