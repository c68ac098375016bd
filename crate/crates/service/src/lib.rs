//! JSON-over-HTTP front end for the finrag pipeline.
//!
//! Routes, all under `/v1`:
//!
//! | method | path            | body / query            |
//! |--------|-----------------|-------------------------|
//! | POST   | `/chat`         | `ChatRequest`           |
//! | POST   | `/kb/documents` | `Document`              |
//! | POST   | `/kb/save_web`  | `{"url": ...}`          |
//! | GET    | `/kb/search`    | `q`, `k`, `metric`      |
//! | GET    | `/config`       |                         |
//! | GET    | `/health`       |                         |
//!
//! Errors are `{"error": message}` with a 4xx/5xx status.

mod config;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use finrag_core::gate::SaveOutcome;
use finrag_core::prompting::TEMPLATE_VERSION;
use finrag_core::websearch::{FetchedPage, SearchResult};
use finrag_core::{
    ChatRequest, Document, EncoderPair, GateError, GenerationBackend, HttpBackend,
    HttpSearchClient, Pipeline, PipelineError, SearchClient, SimilarityMetric, StubBackend,
    VectorIndex, WebError,
};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::limit::RequestBodyLimitLayer;
use tower_http::trace::TraceLayer;

pub use config::{
    BackendMode, ServiceConfig, WebMode, DEFAULT_BIND, DEFAULT_BODY_LIMIT,
    DEFAULT_MAX_CONCURRENT_GENERATIONS, DEFAULT_TIMEOUT_MS,
};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {reason}")]
    Load { path: PathBuf, reason: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Search client used when the web is switched off in config.
struct NoWeb;

impl SearchClient for NoWeb {
    fn search(&self, _: &str, _: usize) -> Result<Vec<SearchResult>, WebError> {
        Err(WebError::Transport("web search is disabled".into()))
    }

    fn fetch(&self, url: &str) -> Result<FetchedPage, WebError> {
        Err(WebError::FetchFailed {
            url: url.into(),
            reason: "web search is disabled".into(),
        })
    }
}

fn load_error(path: &Path, reason: impl ToString) -> ServiceError {
    ServiceError::Load {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn load_encoder(config: &ServiceConfig) -> Result<EncoderPair, ServiceError> {
    match &config.encoder_model {
        Some(path) => {
            let f = File::open(path).map_err(|e| load_error(path, e))?;
            EncoderPair::load(std::io::BufReader::new(f)).map_err(|e| load_error(path, e))
        }
        None => Ok(EncoderPair::tied(
            finrag_core::encoder::DEFAULT_EMBEDDING_DIM,
            finrag_core::encoder::DEFAULT_FEATURE_DIM,
            config.seed,
        )),
    }
}

/// The configured snapshot if it exists, otherwise an empty index.
pub fn load_index(config: &ServiceConfig, dim: usize) -> Result<VectorIndex, ServiceError> {
    match &config.index_snapshot {
        Some(path) if path.exists() => {
            let f = File::open(path).map_err(|e| load_error(path, e))?;
            VectorIndex::load(std::io::BufReader::new(f)).map_err(|e| load_error(path, e))
        }
        _ => Ok(VectorIndex::new(dim)),
    }
}

fn web_client(mode: &WebMode) -> Result<Arc<dyn SearchClient>, ServiceError> {
    Ok(match mode {
        WebMode::Disabled => Arc::new(NoWeb),
        WebMode::Fixture { dir } => {
            Arc::new(finrag_core::FixtureClient::from_dir(dir).map_err(|e| load_error(dir, e))?)
        }
        WebMode::Http {
            endpoint,
            timeout_ms,
        } => Arc::new(
            HttpSearchClient::new(endpoint.clone(), config::timeout(*timeout_ms))
                .map_err(|e| ServiceError::Config(e.to_string()))?,
        ),
    })
}

fn generation_backend(mode: &BackendMode) -> Result<Arc<dyn GenerationBackend>, ServiceError> {
    Ok(match mode {
        BackendMode::Stub => Arc::new(StubBackend),
        BackendMode::Http {
            endpoint,
            timeout_ms,
        } => Arc::new(
            HttpBackend::new(endpoint.clone(), config::timeout(*timeout_ms))
                .map_err(|e| ServiceError::Config(e.to_string()))?,
        ),
    })
}

/// Encoder, index, web client and backend as described by `config`.
pub fn build_pipeline(config: &ServiceConfig) -> Result<Pipeline, ServiceError> {
    config.validate()?;
    let encoder = load_encoder(config)?;
    let kb = load_index(config, encoder.dim())?;
    Ok(Pipeline::new(
        Arc::new(encoder),
        Arc::new(RwLock::new(kb)),
        web_client(&config.web)?,
        generation_backend(&config.backend)?,
        config.settings(),
    )?)
}

struct Inner {
    pipeline: Pipeline,
    generation_slots: Arc<Semaphore>,
    model_version: String,
    web_mode: &'static str,
    snapshot: Option<PathBuf>,
    persist_lock: Mutex<()>,
    body_limit: usize,
    cors_origins: Vec<String>,
    max_concurrent_generations: usize,
}

/// Shared handler state. Cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn from_config(config: &ServiceConfig) -> Result<Self, ServiceError> {
        Self::from_pipeline(build_pipeline(config)?, config)
    }

    /// Wraps an already assembled pipeline; the pipeline's settings win over
    /// those in `config`.
    pub fn from_pipeline(pipeline: Pipeline, config: &ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        Ok(Self {
            inner: Arc::new(Inner {
                model_version: pipeline.encoder.fingerprint(),
                pipeline,
                generation_slots: Arc::new(Semaphore::new(config.max_concurrent_generations)),
                web_mode: config.web.name(),
                snapshot: config
                    .persist_index
                    .then(|| config.index_snapshot.clone())
                    .flatten(),
                persist_lock: Mutex::new(()),
                body_limit: config.body_limit,
                cors_origins: config.cors_origins.clone(),
                max_concurrent_generations: config.max_concurrent_generations,
            }),
        })
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.inner.pipeline
    }

    /// Writes the index snapshot through a temporary file, if persistence is on.
    fn persist(&self) {
        let Some(path) = &self.inner.snapshot else {
            return;
        };
        let _guard = self.inner.persist_lock.lock();
        let tmp = path.with_extension("tmp");
        let result = File::create(&tmp)
            .and_then(|f| {
                let mut w = BufWriter::new(f);
                self.inner.pipeline.kb.read().save(&mut w)?;
                w.into_inner().map_err(|e| e.into_error())?.sync_all()
            })
            .and_then(|()| std::fs::rename(&tmp, path));
        if let Err(e) = result {
            tracing::warn!(path = %path.display(), error = %e, "could not persist index snapshot");
        }
    }
}

fn error(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

/// Runs blocking pipeline work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> T + Send + 'static,
) -> Result<T, Response> {
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        error(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("worker failed: {e}"),
        )
    })
}

fn gate_status(e: &GateError) -> StatusCode {
    match e {
        GateError::InvalidConfig(_) | GateError::NoSources => StatusCode::BAD_REQUEST,
        GateError::DuplicateDocument(_) => StatusCode::CONFLICT,
        GateError::EmptyDocument => StatusCode::UNPROCESSABLE_ENTITY,
        GateError::Web(_) => StatusCode::BAD_GATEWAY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn pipeline_status(e: &PipelineError) -> StatusCode {
    match e {
        e if e.is_client_error() => StatusCode::BAD_REQUEST,
        PipelineError::Generation(_) => StatusCode::SERVICE_UNAVAILABLE,
        PipelineError::Gate(g) => gate_status(g),
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

async fn chat(State(state): State<AppState>, body: Bytes) -> Response {
    let request: ChatRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let _permit = state
        .inner
        .generation_slots
        .clone()
        .acquire_owned()
        .await
        .expect("generation semaphore is never closed");
    let result = blocking(move || {
        let response = state.inner.pipeline.chat(&request)?;
        if response.gate.kb_documents_added > 0 {
            state.persist();
        }
        Ok::<_, PipelineError>(response)
    })
    .await;
    match result {
        Ok(Ok(response)) => Json(response).into_response(),
        Ok(Err(e)) => error(pipeline_status(&e), e),
        Err(resp) => resp,
    }
}

#[derive(Serialize)]
struct IngestResponse {
    id: String,
    chunk_count: usize,
}

async fn add_document(State(state): State<AppState>, body: Bytes) -> Response {
    if body.iter().all(u8::is_ascii_whitespace) {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "request body is empty");
    }
    let doc: Document = match serde_json::from_slice(&body) {
        Ok(d) => d,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    if doc.id.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "document id must not be empty");
    }
    let id = doc.id.clone();
    let result = blocking(move || {
        let chunk_count = state.inner.pipeline.ingest(&doc)?;
        state.persist();
        Ok::<_, GateError>(chunk_count)
    })
    .await;
    match result {
        Ok(Ok(chunk_count)) => Json(IngestResponse { id, chunk_count }).into_response(),
        Ok(Err(e)) => error(gate_status(&e), e),
        Err(resp) => resp,
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SaveWebRequest {
    url: String,
}

async fn save_web(State(state): State<AppState>, body: Bytes) -> Response {
    let request: SaveWebRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let url = request.url.trim().to_string();
    if url.is_empty() {
        return error(StatusCode::BAD_REQUEST, "url must not be empty");
    }
    let result = blocking(move || {
        let outcome = state.inner.pipeline.save_web(&url)?;
        if !outcome.already_present {
            state.persist();
        }
        Ok::<SaveOutcome, GateError>(outcome)
    })
    .await;
    match result {
        Ok(Ok(outcome)) => Json(outcome).into_response(),
        Ok(Err(e)) => error(gate_status(&e), e),
        Err(resp) => resp,
    }
}

#[derive(Deserialize)]
struct SearchParams {
    q: String,
    k: Option<usize>,
    metric: Option<String>,
}

async fn search(
    State(state): State<AppState>,
    params: Result<Query<SearchParams>, QueryRejection>,
) -> Response {
    let Query(params) = match params {
        Ok(p) => p,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    if params.q.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "q must not be empty");
    }
    let settings = &state.inner.pipeline.settings;
    let k = params.k.unwrap_or(settings.gate.k);
    if k == 0 {
        return error(StatusCode::BAD_REQUEST, "k must be at least 1");
    }
    let metric: SimilarityMetric = match params.metric.as_deref().map(str::parse).transpose() {
        Ok(m) => m.unwrap_or(settings.gate.metric),
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let worker = state.clone();
    match blocking(move || worker.inner.pipeline.search(&params.q, k, metric)).await {
        Ok(Ok(hits)) => Json(hits).into_response(),
        Ok(Err(e)) => error(StatusCode::BAD_REQUEST, e),
        Err(resp) => resp,
    }
}

async fn show_config(State(state): State<AppState>) -> Response {
    let inner = &state.inner;
    let pipeline = &inner.pipeline;
    Json(json!({
        "gate": pipeline.settings.gate,
        "prompt": pipeline.settings.prompt,
        "threshold": pipeline.settings.gate.threshold,
        "max_tokens": pipeline.settings.max_tokens,
        "temperature": pipeline.settings.temperature,
        "index_size": pipeline.kb.read().len(),
        "encoder": {
            "model_version": inner.model_version,
            "dim": pipeline.encoder.dim(),
            "feature_dim": pipeline.encoder.feature_dim(),
        },
        "template_version": TEMPLATE_VERSION,
        "web_mode": inner.web_mode,
        "backend_mode": pipeline.backend.name(),
        "max_concurrent_generations": inner.max_concurrent_generations,
    }))
    .into_response()
}

async fn health(State(state): State<AppState>) -> Response {
    match state.inner.pipeline.kb.try_read_for(Duration::from_secs(1)) {
        Some(_) => Json(json!({ "status": "ok" })).into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "busy" })),
        )
            .into_response(),
    }
}

fn cors(origins: &[String]) -> Option<CorsLayer> {
    if origins.is_empty() {
        return None;
    }
    let allow = if origins.iter().any(|o| o == "*") {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    Some(
        CorsLayer::new()
            .allow_origin(allow)
            .allow_methods([Method::GET, Method::POST])
            .allow_headers([axum::http::header::CONTENT_TYPE]),
    )
}

pub fn router(state: AppState) -> Router {
    let limit = state.inner.body_limit;
    let cors = cors(&state.inner.cors_origins);
    let api = Router::new()
        .route("/chat", post(chat))
        .route("/kb/documents", post(add_document))
        .route("/kb/save_web", post(save_web))
        .route("/kb/search", get(search))
        .route("/config", get(show_config))
        .route("/health", get(health));
    let app = Router::new()
        .nest("/v1", api)
        .with_state(state)
        .layer(DefaultBodyLimit::disable())
        .layer(RequestBodyLimitLayer::new(limit))
        .layer(TraceLayer::new_for_http());
    match cors {
        Some(layer) => app.layer(layer),
        None => app,
    }
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

/// Binds, reports the bound address through `on_ready`, and serves until
/// Ctrl-C.
pub async fn serve(
    config: &ServiceConfig,
    on_ready: impl FnOnce(std::net::SocketAddr),
) -> Result<(), ServiceError> {
    let state = AppState::from_config(config)?;
    let listener = tokio::net::TcpListener::bind(&config.bind).await?;
    let addr = listener.local_addr()?;
    tracing::info!(%addr, index_size = state.pipeline().kb.read().len(), "listening");
    on_ready(addr);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    Ok(())
}
