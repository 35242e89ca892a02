//! HTTP API over a trained checkpoint.
//!
//! `GET /schema`, `POST /synthesize` and `POST /interpolate`. Every
//! endpoint answers 503 until the checkpoint has finished loading. Images
//! travel as base64 PNGs in the checkpoint's modality order.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use mmface::checkpoint::Checkpoint;
use mmface::codec::{encode_partial_attributes, AttributeVector, NoiseVector};
use mmface::error::Error;
use mmface::evaluation::{resize_to, sweep_between};
use mmface::export::{png_bytes, to_rgb8};
use mmface::generator::MultimodalImageSet;
use mmface::trainer::TrainedModel;
use rand::TryRngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::cors::CorsLayer;

pub const DEFAULT_PORT: u16 = 8787;
pub const MIN_STEPS: usize = 2;
pub const MAX_STEPS: usize = 33;
/// Seeds chosen by the server stay below 2^53 so JavaScript clients can
/// echo them back without rounding.
pub const MAX_SERVER_SEED: u64 = (1 << 53) - 1;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server failed: {0}")]
    Serve(#[source] std::io::Error),
    #[error("cannot load checkpoint: {0}")]
    Load(#[from] Error),
}

/// An error response with a JSON `{"error": ...}` body.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Schema(_) | Error::Validation(_) | Error::Input(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaResponse {
    pub attributes: Vec<String>,
    pub modalities: Vec<String>,
    pub max_resolution: usize,
    pub model_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisRequest {
    #[serde(default)]
    pub attributes: BTreeMap<String, f32>,
    pub seed: Option<u64>,
    pub modalities: Option<Vec<String>>,
    pub resolution: Option<usize>,
}

/// One endpoint of an interpolation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    #[serde(default)]
    pub attributes: BTreeMap<String, f32>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolationRequest {
    pub from: Endpoint,
    /// Defaults to `from`'s seed when unset, giving a pure attribute sweep.
    pub to: Endpoint,
    pub steps: usize,
    pub modalities: Option<Vec<String>>,
    pub resolution: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub modality: String,
    pub png_base64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResponse {
    pub images: Vec<ImageEntry>,
    pub attributes: serde_json::Map<String, serde_json::Value>,
    pub seed: u64,
    pub resolution: usize,
    pub model_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub beta: f32,
    pub images: Vec<ImageEntry>,
    pub attributes: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationResponse {
    pub frames: Vec<Frame>,
    pub from_seed: u64,
    pub to_seed: u64,
    pub resolution: usize,
    pub model_hash: String,
}

/// A checkpoint ready for inference, identified by the SHA-256 of its bytes.
pub struct LoadedModel {
    pub model: TrainedModel,
    pub hash: String,
}

impl LoadedModel {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        let model = TrainedModel::from_checkpoint(&Checkpoint::from_bytes(bytes)?)?;
        Ok(Self {
            model,
            hash: hex::encode(Sha256::digest(bytes)),
        })
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn max_resolution(&self) -> usize {
        self.model.generator.resolution()
    }

    pub fn schema(&self) -> SchemaResponse {
        SchemaResponse {
            attributes: self.model.schema.names().to_vec(),
            modalities: self.model.modalities.clone(),
            max_resolution: self.max_resolution(),
            model_hash: self.hash.clone(),
        }
    }

    fn resolution(&self, requested: Option<usize>) -> Result<usize, ApiError> {
        let max = self.max_resolution();
        let r = requested.unwrap_or(max);
        if r < 4 || r > max || !r.is_power_of_two() {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("resolution {r} is not a power of two in [4, {max}]"),
            ));
        }
        Ok(r)
    }

    /// Indices of the requested modalities, in checkpoint order.
    fn modality_indices(&self, names: Option<&[String]>) -> Result<Vec<usize>, ApiError> {
        let all = &self.model.modalities;
        let Some(names) = names else {
            return Ok((0..all.len()).collect());
        };
        if let Some(bad) = names.iter().find(|n| !all.contains(n)) {
            return Err(ApiError::bad_request(format!("unknown modality {bad:?}")));
        }
        Ok((0..all.len()).filter(|&i| names.contains(&all[i])).collect())
    }

    fn attribute_map(&self, y: &AttributeVector) -> serde_json::Map<String, serde_json::Value> {
        self.model
            .schema
            .names()
            .iter()
            .zip(y.values())
            .map(|(n, &v)| (n.clone(), serde_json::Value::from(v)))
            .collect()
    }

    fn render(&self, set: &MultimodalImageSet, modalities: &[usize], resolution: usize) -> Result<Vec<ImageEntry>, ApiError> {
        modalities
            .iter()
            .map(|&m| {
                let image = resize_to(&set.images[m], resolution)?;
                let png = png_bytes(&to_rgb8(&image)?)?;
                Ok(ImageEntry {
                    modality: self.model.modalities[m].clone(),
                    png_base64: base64::engine::general_purpose::STANDARD.encode(png),
                })
            })
            .collect()
    }

    fn noise(&self, seed: u64) -> NoiseVector {
        self.model.noise.sample(seed)
    }

    pub fn synthesize(&self, req: &SynthesisRequest) -> Result<SynthesisResponse, ApiError> {
        let y = encode_partial_attributes(&req.attributes, &self.model.schema)?;
        let modalities = self.modality_indices(req.modalities.as_deref())?;
        let resolution = self.resolution(req.resolution)?;
        let seed = req.seed.unwrap_or_else(random_seed);
        let set = self.model.generator.synthesize(&self.noise(seed), &y)?;
        Ok(SynthesisResponse {
            images: self.render(&set, &modalities, resolution)?,
            attributes: self.attribute_map(&y),
            seed,
            resolution,
            model_hash: self.hash.clone(),
        })
    }

    pub fn interpolate(&self, req: &InterpolationRequest) -> Result<InterpolationResponse, ApiError> {
        if !(MIN_STEPS..=MAX_STEPS).contains(&req.steps) {
            return Err(ApiError::bad_request(format!(
                "steps must be in [{MIN_STEPS}, {MAX_STEPS}], got {}",
                req.steps
            )));
        }
        let y1 = encode_partial_attributes(&req.from.attributes, &self.model.schema)?;
        let y2 = encode_partial_attributes(&req.to.attributes, &self.model.schema)?;
        let modalities = self.modality_indices(req.modalities.as_deref())?;
        let resolution = self.resolution(req.resolution)?;
        let from_seed = req.from.seed.unwrap_or_else(random_seed);
        let to_seed = req.to.seed.unwrap_or(from_seed);
        let (z1, z2) = (self.noise(from_seed), self.noise(to_seed));
        let sweep = sweep_between(&self.model.generator, (&z1, &y1), (&z2, &y2), req.steps)?;
        let frames = sweep
            .betas
            .iter()
            .zip(&sweep.codes)
            .zip(&sweep.frames)
            .map(|((&beta, (_, y)), set)| {
                Ok(Frame {
                    beta,
                    images: self.render(set, &modalities, resolution)?,
                    attributes: self.attribute_map(y),
                })
            })
            .collect::<Result<_, ApiError>>()?;
        Ok(InterpolationResponse {
            frames,
            from_seed,
            to_seed,
            resolution,
            model_hash: self.hash.clone(),
        })
    }
}

/// Seed from the operating system's random source.
pub fn random_seed() -> u64 {
    rand::rngs::OsRng
        .try_next_u64()
        .expect("operating system random source is unavailable")
        & MAX_SERVER_SEED
}

/// Shared handler state. The model slot is filled once loading finishes.
#[derive(Clone, Default)]
pub struct AppState {
    model: Arc<OnceLock<Arc<LoadedModel>>>,
}

impl AppState {
    pub fn loading() -> Self {
        Self::default()
    }

    pub fn ready(model: LoadedModel) -> Self {
        let state = Self::default();
        state.install(model);
        state
    }

    /// Makes `model` available; later calls are ignored.
    pub fn install(&self, model: LoadedModel) {
        let _ = self.model.set(Arc::new(model));
    }

    fn model(&self) -> Result<Arc<LoadedModel>, ApiError> {
        self.model
            .get()
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model is still loading"))
    }
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// Runs synthesis off the async executor; the generator is CPU bound.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn schema(State(state): State<AppState>) -> Result<Json<SchemaResponse>, ApiError> {
    Ok(Json(state.model()?.schema()))
}

async fn synthesize(State(state): State<AppState>, body: Bytes) -> Result<Json<SynthesisResponse>, ApiError> {
    let model = state.model()?;
    let req: SynthesisRequest = parse_body(&body)?;
    blocking(move || model.synthesize(&req)).await.map(Json)
}

async fn interpolate(State(state): State<AppState>, body: Bytes) -> Result<Json<InterpolationResponse>, ApiError> {
    let model = state.model()?;
    let req: InterpolationRequest = parse_body(&body)?;
    blocking(move || model.interpolate(&req)).await.map(Json)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/schema", get(schema))
        .route("/synthesize", post(synthesize))
        .route("/interpolate", post(interpolate))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves on `listener` while `checkpoint` loads in the background.
/// Returns early with the load error if the checkpoint cannot be read.
pub async fn serve(listener: tokio::net::TcpListener, checkpoint: PathBuf) -> Result<(), ServiceError> {
    let state = AppState::loading();
    let app = router(state.clone());
    let (fail_tx, fail_rx) = tokio::sync::oneshot::channel();
    tokio::task::spawn_blocking(move || match LoadedModel::load(&checkpoint) {
        Ok(model) => state.install(model),
        Err(e) => {
            let _ = fail_tx.send(e);
        }
    });
    let failure = Arc::new(Mutex::new(None));
    let slot = failure.clone();
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            match fail_rx.await {
                Ok(e) => *slot.lock().unwrap() = Some(e),
                // The loader succeeded; serve until the process is stopped.
                Err(_) => std::future::pending::<()>().await,
            }
        })
        .await
        .map_err(ServiceError::Serve)?;
    let failed = failure.lock().unwrap().take();
    match failed {
        Some(e) => Err(ServiceError::Load(e)),
        None => Ok(()),
    }
}

/// Blocking entry point: binds `0.0.0.0:port` and serves `checkpoint`.
pub fn run(checkpoint: PathBuf, port: u16) -> Result<(), ServiceError> {
    let runtime = tokio::runtime::Runtime::new().map_err(ServiceError::Serve)?;
    runtime.block_on(async {
        let addr = SocketAddr::from(([0, 0, 0, 0], port));
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|source| ServiceError::Bind { addr, source })?;
        eprintln!("listening on http://{addr}");
        serve(listener, checkpoint).await
    })
}
