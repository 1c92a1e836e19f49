//! The loopback HTTP API under `/v1`.
//!
//! Handlers delegate to the pipeline scheduler and the model store. Request
//! bodies are never logged; the access log records method, path, status and
//! latency only.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use axum::extract::{Path, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use localmt::pipeline::{
    EngineConfig, Outcome, PipelineError, RequestOptions, Scheduler, TranslationRequest,
};
use localmt::registry::demo::tiny_config;
use localmt::registry::{
    download_install, fetch_catalog, CatalogEntry, HttpClient, InstalledModel, ModelManifest, RegistryError,
    Store, StoreModelSource, APP_NAME, APP_VERSION,
};

pub const PORT_ENV: &str = "APP_PORT";
pub const CATALOG_URL_ENV: &str = "APP_CATALOG_URL";
pub const DEFAULT_PORT: u16 = 8787;
pub const DEFAULT_CATALOG_URL: &str = "https://models.localmt.org/catalog/v1.json";

/// Runtime settings of the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub bind: IpAddr,
    pub port: u16,
    pub data_dir: PathBuf,
    pub threads: Option<usize>,
    pub max_batch_tokens: Option<usize>,
    pub as_you_type_enabled: bool,
    pub catalog_url: String,
}

impl ServiceConfig {
    pub fn new(data_dir: PathBuf) -> Self {
        Self {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: DEFAULT_PORT,
            data_dir,
            threads: None,
            max_batch_tokens: None,
            as_you_type_enabled: true,
            catalog_url: DEFAULT_CATALOG_URL.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.port < 1024 {
            return Err(format!("port {} is outside [1024, 65535]", self.port));
        }
        if self.threads == Some(0) {
            return Err("threads must be at least 1".into());
        }
        if self.max_batch_tokens == Some(0) {
            return Err("max_batch_tokens must be at least 1".into());
        }
        Ok(())
    }

    pub fn addr(&self) -> SocketAddr {
        SocketAddr::new(self.bind, self.port)
    }

    /// Auto-tuned engine settings with the user's overrides applied. Sizing
    /// uses the production architecture as reference since the model is only
    /// known per request.
    pub fn engine(&self) -> EngineConfig {
        EngineConfig::detect(&tiny_config()).with_overrides(self.threads, self.max_batch_tokens)
    }
}

pub struct AppState {
    config: RwLock<ServiceConfig>,
    store: Arc<Store>,
    scheduler: Scheduler,
    client: HttpClient,
    catalog: Mutex<Option<Vec<CatalogEntry>>>,
    anonymous_sessions: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> anyhow::Result<Arc<Self>> {
        config.validate().map_err(anyhow::Error::msg)?;
        let store = Arc::new(Store::open(&config.data_dir)?);
        // Anything older than this in staging belongs to a process that died.
        store.sweep_staging(std::time::Duration::from_secs(3600))?;
        let source = Arc::new(StoreModelSource::new(store.clone()));
        let scheduler = Scheduler::new(config.engine(), source)?;
        Ok(Arc::new(Self {
            config: RwLock::new(config),
            store,
            scheduler,
            client: HttpClient::new(),
            catalog: Mutex::new(None),
            anonymous_sessions: AtomicU64::new(0),
        }))
    }

    pub fn config(&self) -> ServiceConfig {
        self.config.read().expect("config lock").clone()
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }
}

/// JSON error body `{code, message}` with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let (status, code) = match &e {
            PipelineError::ModelNotFound(_) => (StatusCode::NOT_FOUND, "model_not_found"),
            PipelineError::NonMonotoneGeneration { .. } | PipelineError::Cancelled => {
                (StatusCode::CONFLICT, "SUPERSEDED")
            }
            PipelineError::Config(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            PipelineError::ModelLoad { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "model_load_failed"),
            PipelineError::Model(_) | PipelineError::Text(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "translation_failed")
            }
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        let (status, code) = match &e {
            RegistryError::NotFound(_) => (StatusCode::NOT_FOUND, "model_not_found"),
            RegistryError::InstallInProgress(_) => (StatusCode::CONFLICT, "install_in_progress"),
            RegistryError::ChecksumMismatch { .. } | RegistryError::SizeMismatch { .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "checksum_mismatch")
            }
            RegistryError::Network(_) => (StatusCode::BAD_GATEWAY, "network_error"),
            RegistryError::MalformedCatalog(_) | RegistryError::UnknownSchema(_) => {
                (StatusCode::BAD_GATEWAY, "bad_catalog")
            }
            RegistryError::Io(_) | RegistryError::Injected(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io_error"),
            _ => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_package"),
        };
        Self::new(status, code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/models", get(list_models))
        .route("/v1/models/{id}", delete(delete_model))
        .route("/v1/models/download", post(download_model))
        .route("/v1/models/import", post(import_model))
        .route("/v1/catalog", get(catalog))
        .route("/v1/translate", post(translate))
        .route("/v1/settings", get(get_settings).put(put_settings))
        .layer(middleware::from_fn(access_log))
        .with_state(state)
}

async fn access_log(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let start = Instant::now();
    let resp = next.run(req).await;
    tracing::info!(
        %method,
        %path,
        status = resp.status().as_u16(),
        ms = start.elapsed().as_millis() as u64,
        "request"
    );
    resp
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "name": APP_NAME,
        "version": APP_VERSION,
        "ready": true,
        "in_flight": state.scheduler.in_flight(),
    }))
}

#[derive(Serialize)]
struct ModelView {
    #[serde(flatten)]
    manifest: ModelManifest,
    size_bytes: u64,
    sha256: String,
    origin: localmt::registry::InstallOrigin,
}

impl From<InstalledModel> for ModelView {
    fn from(m: InstalledModel) -> Self {
        Self { manifest: m.manifest, size_bytes: m.size_bytes, sha256: m.archive_sha256, origin: m.origin }
    }
}

async fn list_models(State(state): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    let store = state.store.clone();
    let models = blocking(move || Ok(store.list_local()?)).await?;
    let views: Vec<ModelView> = models.into_iter().map(ModelView::from).collect();
    Ok(Json(json!({ "models": views })))
}

async fn delete_model(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let store = state.store.clone();
    let removed = blocking(move || Ok(store.delete(&id)?)).await?;
    let versions: Vec<String> = removed.into_iter().map(|m| m.manifest.version).collect();
    Ok(Json(json!({ "deleted": versions })))
}

fn fetch_and_cache(state: &AppState) -> ApiResult<Vec<CatalogEntry>> {
    let url = state.config().catalog_url;
    let entries = fetch_catalog(&state.client, &url)?;
    *state.catalog.lock().expect("catalog cache") = Some(entries.clone());
    Ok(entries)
}

async fn catalog(State(state): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    let entries = blocking(move || fetch_and_cache(&state)).await?;
    Ok(Json(json!({ "models": entries })))
}

#[derive(Deserialize)]
struct DownloadBody {
    id: String,
    version: Option<String>,
}

async fn download_model(
    State(state): State<Arc<AppState>>,
    Json(body): Json<DownloadBody>,
) -> ApiResult<Json<ModelView>> {
    if state.store.is_installing(&body.id) {
        return Err(RegistryError::InstallInProgress(body.id).into());
    }
    let installed = blocking(move || {
        let cached = state.catalog.lock().expect("catalog cache").clone();
        let entries = match cached {
            Some(e) => e,
            None => fetch_and_cache(&state)?,
        };
        let entry = entries
            .iter()
            .filter(|e| e.id == body.id && body.version.as_ref().is_none_or(|v| *v == e.version))
            .max_by(|a, b| semver_of(&a.version).cmp(&semver_of(&b.version)))
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "model_not_found", format!("{} is not in the catalog", body.id)))?;
        Ok(download_install(&state.client, &state.store, entry)?)
    })
    .await?;
    Ok(Json(installed.into()))
}

fn semver_of(v: &str) -> Option<semver::Version> {
    semver::Version::parse(v).ok()
}

#[derive(Deserialize)]
struct ImportBody {
    path: PathBuf,
}

async fn import_model(State(state): State<Arc<AppState>>, Json(body): Json<ImportBody>) -> ApiResult<Json<ModelView>> {
    let store = state.store.clone();
    let installed = blocking(move || Ok(store.import_archive(&body.path)?)).await?;
    Ok(Json(installed.into()))
}

#[derive(Deserialize)]
struct TranslateBody {
    model: String,
    text: String,
    session: Option<String>,
    generation: Option<u64>,
    threads: Option<usize>,
    max_batch_tokens: Option<usize>,
}

async fn translate(
    State(state): State<Arc<AppState>>,
    Json(body): Json<TranslateBody>,
) -> ApiResult<Json<serde_json::Value>> {
    let anonymous = body.session.is_none();
    let (session_id, generation) = match (body.session, body.generation) {
        (Some(s), Some(g)) => (s, g),
        (Some(_), None) => return Err(ApiError::bad_request("generation is required with session")),
        // One-shot requests get a private session that cannot collide with client ids.
        (None, g) => {
            let n = state.anonymous_sessions.fetch_add(1, Ordering::Relaxed);
            (format!("\u{0}anonymous-{n}"), g.unwrap_or(1).max(1))
        }
    };
    let request = TranslationRequest {
        session_id,
        generation,
        model_id: body.model,
        text: body.text,
        options: RequestOptions { threads_override: body.threads, max_batch_tokens_override: body.max_batch_tokens },
    };
    let session_id = request.session_id.clone();
    let handle = state.scheduler.submit(request)?;
    let outcome = handle.recv().await;
    if anonymous {
        state.scheduler.end_session(&session_id);
    }
    match outcome? {
        Outcome::Translated(text) => Ok(Json(json!({ "text": text, "generation": generation }))),
        Outcome::Cancelled => Err(ApiError::new(
            StatusCode::CONFLICT,
            "SUPERSEDED",
            format!("generation {generation} was superseded"),
        )),
    }
}

#[derive(Serialize)]
struct SettingsView {
    #[serde(flatten)]
    config: ServiceConfig,
    engine: EngineConfig,
}

fn settings_view(state: &AppState) -> SettingsView {
    SettingsView { config: state.config(), engine: state.scheduler.engine_config() }
}

async fn get_settings(State(state): State<Arc<AppState>>) -> Json<SettingsView> {
    Json(settings_view(&state))
}

/// Fields that may change at runtime. `null` clears an override.
#[derive(Deserialize)]
struct SettingsPatch {
    #[serde(default, with = "double_option")]
    threads: Option<Option<usize>>,
    #[serde(default, with = "double_option")]
    max_batch_tokens: Option<Option<usize>>,
    as_you_type_enabled: Option<bool>,
}

mod double_option {
    use serde::{Deserialize, Deserializer};

    pub fn deserialize<'de, D, T>(d: D) -> Result<Option<Option<T>>, D::Error>
    where
        D: Deserializer<'de>,
        T: Deserialize<'de>,
    {
        Option::<T>::deserialize(d).map(Some)
    }
}

async fn put_settings(
    State(state): State<Arc<AppState>>,
    Json(patch): Json<SettingsPatch>,
) -> ApiResult<Json<SettingsView>> {
    let mut next = state.config();
    if let Some(t) = patch.threads {
        next.threads = t;
    }
    if let Some(b) = patch.max_batch_tokens {
        next.max_batch_tokens = b;
    }
    if let Some(a) = patch.as_you_type_enabled {
        next.as_you_type_enabled = a;
    }
    next.validate().map_err(ApiError::bad_request)?;
    state.scheduler.set_engine_config(next.engine())?;
    *state.config.write().expect("config lock") = next;
    Ok(Json(settings_view(&state)))
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    state: Arc<AppState>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
