//! HTTP service behind the zone-score editor.
//!
//! Three endpoints: `GET /zones`, `POST /infer` and `GET /healthz`. Models are
//! loaded once and shared read-only between requests; inference runs on a
//! bounded pool of blocking workers.

mod error;
mod infer;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ldla_core::atlas::ZoneRegistry;
use ldla_core::inference::{DiffusionRefiner, IdentityRefiner, Models, Refiner};
use ldla_core::training::file_hash;
use serde::Serialize;
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub use error::{ApiError, FieldError};
pub use infer::{AppliedScore, InferRequest, InferResponse, ParamsOverride, Timing};

pub const DEFAULT_PORT: u16 = 8742;
pub const DEFAULT_WORKERS: usize = 2;
/// Largest accepted image upload.
pub const MAX_IMAGE_BYTES: usize = 16 * 1024 * 1024;
/// Room for the JSON part and multipart framing on top of the image.
const BODY_SLACK: usize = 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RefinerKind {
    #[default]
    Diffusion,
    Identity,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub port: u16,
    pub workers: usize,
    /// `None` allows any origin.
    pub cors_origin: Option<String>,
    pub refiner: RefinerKind,
    pub refiner_strength: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: DEFAULT_PORT,
            workers: DEFAULT_WORKERS,
            cors_origin: None,
            refiner: RefinerKind::default(),
            refiner_strength: ldla_core::inference::DEFAULT_REFINER_STRENGTH,
        }
    }
}

/// Everything a request needs once loading has finished.
pub struct Loaded {
    pub models: Models,
    pub refiner: Arc<dyn Refiner>,
    pub checkpoint_hash: String,
    pub parameter_checksum: String,
}

impl Loaded {
    pub fn new(models: Models, refiner: RefinerKind, checkpoint_hash: String) -> ldla_core::Result<Self> {
        let refiner: Arc<dyn Refiner> = match refiner {
            RefinerKind::Identity => Arc::new(IdentityRefiner),
            RefinerKind::Diffusion => Arc::new(DiffusionRefiner::new(models.clone())),
        };
        Ok(Self {
            parameter_checksum: models.parameter_checksum()?,
            models,
            refiner,
            checkpoint_hash,
        })
    }

    pub fn from_checkpoint(path: &std::path::Path, refiner: RefinerKind) -> ldla_core::Result<Self> {
        let hash = file_hash(path)?;
        Self::new(Models::load(path)?, refiner, hash)
    }
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Shared>,
}

struct Shared {
    registry: ZoneRegistry,
    registry_hash: String,
    loaded: OnceLock<Arc<Loaded>>,
    workers: Semaphore,
    refiner_strength: f64,
}

impl AppState {
    /// Fails on an empty registry or a zero-sized worker pool.
    pub fn new(registry: ZoneRegistry, config: &ServiceConfig) -> Result<Self, String> {
        if registry.is_empty() {
            return Err("zone registry is empty".into());
        }
        if config.workers == 0 {
            return Err("worker pool size must be at least 1".into());
        }
        let registry_hash = hex::encode(Sha256::digest(registry.to_json().as_bytes()));
        Ok(Self {
            inner: Arc::new(Shared {
                registry,
                registry_hash,
                loaded: OnceLock::new(),
                workers: Semaphore::new(config.workers),
                refiner_strength: config.refiner_strength,
            }),
        })
    }

    /// Installs the models. Only the first call has an effect.
    pub fn set_loaded(&self, loaded: Loaded) -> bool {
        self.inner.loaded.set(Arc::new(loaded)).is_ok()
    }

    pub fn loaded(&self) -> Option<Arc<Loaded>> {
        self.inner.loaded.get().cloned()
    }

    pub fn registry(&self) -> &ZoneRegistry {
        &self.inner.registry
    }

    pub fn registry_hash(&self) -> &str {
        &self.inner.registry_hash
    }
}

#[derive(Debug, Serialize)]
struct ZoneEntry {
    zone_id: String,
    display_noun: String,
    scale_max: f64,
    default_box: [f64; 4],
}

async fn zones(State(state): State<AppState>) -> Json<Vec<ZoneEntry>> {
    Json(
        state
            .registry()
            .zones()
            .iter()
            .map(|z| ZoneEntry {
                zone_id: z.zone_id.clone(),
                display_noun: z.display_noun.clone(),
                scale_max: z.scale_max,
                default_box: z.default_box,
            })
            .collect(),
    )
}

#[derive(Debug, Serialize)]
struct Health<'a> {
    status: &'a str,
    checkpoint_hash: Option<&'a str>,
    registry_hash: &'a str,
    parameter_checksum: Option<&'a str>,
}

async fn healthz(State(state): State<AppState>) -> Response {
    let loaded = state.loaded();
    let body = Health {
        status: if loaded.is_some() { "ok" } else { "loading" },
        checkpoint_hash: loaded.as_deref().map(|l| l.checkpoint_hash.as_str()),
        registry_hash: state.registry_hash(),
        parameter_checksum: loaded.as_deref().map(|l| l.parameter_checksum.as_str()),
    };
    let code = if loaded.is_some() {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    (code, Json(body)).into_response()
}

fn cors(origin: Option<&str>) -> Result<CorsLayer, String> {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    Ok(match origin {
        None => layer.allow_origin(Any),
        Some(o) => {
            let v = HeaderValue::from_str(o).map_err(|e| format!("bad CORS origin `{o}`: {e}"))?;
            layer.allow_origin(AllowOrigin::exact(v))
        }
    })
}

pub fn router(state: AppState, config: &ServiceConfig) -> Result<Router, String> {
    Ok(Router::new()
        .route("/zones", get(zones))
        .route("/healthz", get(healthz))
        .route("/infer", post(infer::infer))
        .layer(DefaultBodyLimit::max(MAX_IMAGE_BYTES + BODY_SLACK))
        .layer(cors(config.cors_origin.as_deref())?)
        .with_state(state))
}

/// Binds, starts loading the checkpoint in the background and serves until
/// ctrl-c.
pub async fn serve(
    config: ServiceConfig,
    registry: ZoneRegistry,
    checkpoint: PathBuf,
) -> Result<(), String> {
    let state = AppState::new(registry, &config)?;
    let app = router(state.clone(), &config)?;
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| format!("cannot bind {addr}: {e}"))?;
    log::info!("listening on {addr}");

    let refiner = config.refiner;
    let loader = tokio::task::spawn_blocking(move || Loaded::from_checkpoint(&checkpoint, refiner));
    let load_state = state.clone();
    tokio::spawn(async move {
        match loader.await {
            Ok(Ok(loaded)) => {
                log::info!("checkpoint {} loaded", loaded.checkpoint_hash);
                load_state.set_loaded(loaded);
            }
            Ok(Err(e)) => log::error!("checkpoint load failed: {e}"),
            Err(e) => log::error!("checkpoint loader panicked: {e}"),
        }
    });

    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| e.to_string())
}
