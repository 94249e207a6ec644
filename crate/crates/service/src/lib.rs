//! HTTP/JSON inference API over one immutable checkpoint.
//!
//! Routes mirror the translation operations. Every route that works on a
//! source image takes either a `session_id` from `POST /api/session` or an
//! inline base64 `image`; inline images are cached as sessions too, keyed by
//! a hash of their pixels, so the same image always gets the same id.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Request, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tower_http::services::ServeDir;

use vbitn_core::autodiff::Tensor;
use vbitn_core::checkpoint::Checkpoint;
use vbitn_core::data_synth::{decode_png, encode_png, png_dimensions, ImageBatch};
use vbitn_core::distributions::DiagGaussian;
use vbitn_core::networks::{ModelBundle, Posterior};
use vbitn_core::translation::{self, request_rng, LatentPair, StyleSource, Translation};
use vbitn_core::Error as CoreError;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Largest accepted PNG payload after base64 decoding.
    pub max_image_bytes: usize,
    /// Sessions kept before the oldest are dropped.
    pub max_sessions: usize,
    /// Upper bound for `l` and `m`.
    pub max_samples: usize,
    /// `None` allows any origin.
    pub cors_origin: Option<String>,
    /// Served at `/` when set (the editor bundle).
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { max_image_bytes: 1 << 20, max_sessions: 4096, max_samples: 64, cors_origin: None, static_dir: None }
    }
}

/// Hex sha256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Session {
    id: String,
    image: Tensor<f32>,
    posterior: Posterior,
    last_seed: Mutex<Option<u64>>,
}

#[derive(Default)]
struct Sessions {
    map: HashMap<String, Arc<Session>>,
    order: VecDeque<String>,
}

struct Inner {
    bundle: ModelBundle,
    checkpoint_id: String,
    dataset: Option<ImageBatch>,
    sessions: RwLock<Sessions>,
    config: ServiceConfig,
}

/// Shared, read-only model snapshot plus the session cache.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// `dataset` backs `{"dataset_index": i}` session requests.
    pub fn new(bundle: ModelBundle, checkpoint_id: String, dataset: Option<ImageBatch>, config: ServiceConfig) -> Self {
        Self(Arc::new(Inner { bundle, checkpoint_id, dataset, sessions: RwLock::new(Sessions::default()), config }))
    }

    /// Loads a checkpoint; its id is the sha256 of the file.
    pub fn from_checkpoint(path: &Path, dataset: Option<ImageBatch>, config: ServiceConfig) -> vbitn_core::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        let bundle = Checkpoint::from_bytes(&bytes)?.bundle()?;
        Ok(Self::new(bundle, sha256_hex(&bytes), dataset, config))
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.0.bundle
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.0.checkpoint_id
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        let sessions = self.0.sessions.read().expect("session lock");
        sessions.map.get(id).cloned().ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`")))
    }

    fn open(&self, image: Tensor<f32>) -> Result<Arc<Session>, ApiError> {
        let bytes: Vec<u8> = image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let id = sha256_hex(&bytes)[..32].to_string();
        if let Ok(s) = self.session(&id) {
            return Ok(s);
        }
        let [_, h, w, c] = self.0.bundle.arch.image_shape(1);
        let batch = image.clone().reshaped(vec![1, h, w, c]).map_err(CoreError::from)?;
        let posterior = self.0.bundle.encode(&self.0.bundle.source().id, &batch)?.remove(0);
        let session = Arc::new(Session { id: id.clone(), image, posterior, last_seed: Mutex::new(None) });
        let mut sessions = self.0.sessions.write().expect("session lock");
        if let Some(existing) = sessions.map.get(&id) {
            return Ok(existing.clone());
        }
        while sessions.map.len() >= self.0.config.max_sessions.max(1) {
            match sessions.order.pop_front() {
                Some(old) => sessions.map.remove(&old),
                None => break,
            };
        }
        sessions.order.push_back(id.clone());
        sessions.map.insert(id, session.clone());
        Ok(session)
    }

    fn decode_image(&self, b64: &str) -> Result<Tensor<f32>, ApiError> {
        let limit = self.0.config.max_image_bytes;
        // base64 expands 3 bytes to 4 characters
        if b64.len() / 4 * 3 > limit + 3 {
            return Err(ApiError::too_large(format!("image payload exceeds {limit} bytes")));
        }
        let bytes = B64.decode(b64.trim()).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_base64", e.to_string()))?;
        if bytes.len() > limit {
            return Err(ApiError::too_large(format!("image payload is {} bytes, limit {limit}", bytes.len())));
        }
        let (w, h) = png_dimensions(&bytes)?;
        let [_, eh, ew, _] = self.0.bundle.arch.image_shape(1);
        let expect = format!("the model takes {ew}x{eh} RGB images");
        if w as usize > ew || h as usize > eh {
            return Err(ApiError::too_large(format!("image is {w}x{h}; {expect}")));
        }
        if (w as usize, h as usize) != (ew, eh) {
            return Err(ApiError::invalid(format!("image is {w}x{h}; {expect}")));
        }
        Ok(decode_png(&bytes)?)
    }

    fn resolve(&self, source: &Source) -> Result<Arc<Session>, ApiError> {
        match (&source.session_id, &source.image) {
            (Some(id), None) => self.session(id),
            (None, Some(img)) => self.open(self.decode_image(img)?),
            (Some(_), Some(_)) => Err(ApiError::invalid("give either session_id or image, not both")),
            (None, None) => Err(ApiError::invalid("missing session_id or image")),
        }
    }

    fn check_count(&self, what: &str, n: usize) -> Result<(), ApiError> {
        let max = self.0.config.max_samples;
        if n == 0 || n > max {
            return Err(ApiError::invalid(format!("{what} must be in 1..={max}, got {n}")));
        }
        Ok(())
    }
}

/// JSON error body `{"error": {"code", "message"}}` with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }

    fn too_large(message: impl Into<String>) -> Self {
        Self::new(StatusCode::PAYLOAD_TOO_LARGE, "image_too_large", message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::UnknownDomain(_) => "unknown_domain",
            CoreError::Dist(_) => "constraint_violation",
            CoreError::Image(_) => "bad_image",
            CoreError::Invalid(_) | CoreError::Tensor(_) => "invalid_request",
            _ => return Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        };
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        let code = match e.status() {
            StatusCode::PAYLOAD_TOO_LARGE => "body_too_large",
            StatusCode::UNPROCESSABLE_ENTITY => "invalid_request",
            _ => "bad_request",
        };
        Self::new(e.status(), code, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: ErrorDetail { code: self.code.to_string(), message: self.message } };
        (self.status, Json(body)).into_response()
    }
}

/// `Json` whose rejections use the API error shape.
struct Body<T>(T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        Ok(Self(Json::<T>::from_request(req, state).await?.0))
    }
}

/// Where a route's source image comes from.
#[derive(Deserialize, Debug, Clone, Default)]
pub struct Source {
    #[serde(default)]
    pub session_id: Option<String>,
    /// Base64 PNG.
    #[serde(default)]
    pub image: Option<String>,
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub dataset_index: Option<usize>,
}

#[derive(Deserialize, Debug)]
pub struct TranslateRequest {
    #[serde(flatten)]
    pub source: Source,
    pub target: String,
    pub seed: u64,
}

#[derive(Deserialize, Debug)]
pub struct EditStyleRequest {
    #[serde(flatten)]
    pub source: Source,
    pub target: String,
    pub l: usize,
    pub seed: u64,
}

#[derive(Deserialize, Debug)]
pub struct EditContentRequest {
    #[serde(flatten)]
    pub source: Source,
    pub target: String,
    pub m: usize,
    pub seed: u64,
}

#[derive(Deserialize, Debug)]
pub struct MixRequest {
    #[serde(flatten)]
    pub source: Source,
    /// One weight per target domain, in `/api/meta` order.
    pub weights: Vec<f64>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct DomainInfo {
    pub id: String,
    pub role: String,
    pub alpha: Vec<f32>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct MetaResponse {
    pub domains: Vec<DomainInfo>,
    pub source: String,
    pub targets: Vec<String>,
    pub style_dim: usize,
    pub content_dim: usize,
    /// `[H, W, C]`.
    pub image_shape: [usize; 3],
    pub checkpoint_id: String,
    pub dataset_size: Option<usize>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct SessionResponse {
    pub session_id: String,
    pub style: GaussianSummary,
    pub content: GaussianSummary,
}

/// Latents as f32, which serialize as shortest round-trip decimals.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Latents {
    pub y: Vec<f32>,
    pub z: Vec<f32>,
    pub y_source: StyleSource,
    pub z_source: translation::ContentSource,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct TranslateResponse {
    pub session_id: String,
    pub seed: u64,
    pub target: String,
    pub image: String,
    pub latents: Latents,
    pub decoder: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct EditStyleResponse {
    pub session_id: String,
    pub seed: u64,
    pub target: String,
    pub images: Vec<String>,
    pub y_list: Vec<Vec<f32>>,
    /// The shared content draw.
    pub z: Vec<f32>,
    pub latents: Vec<Latents>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct EditContentResponse {
    pub session_id: String,
    pub seed: u64,
    pub target: String,
    pub images: Vec<String>,
    pub z_list: Vec<Vec<f32>>,
    /// The shared style draw.
    pub y: Vec<f32>,
    pub latents: Vec<Latents>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct MixResponse {
    pub session_id: String,
    pub seed: u64,
    pub weights: Vec<f64>,
    pub image: String,
    pub y: Vec<f32>,
    pub z: Vec<f32>,
    pub y_source: StyleSource,
    pub chosen_decoder: String,
}

fn f32s(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

fn summary(g: &DiagGaussian) -> GaussianSummary {
    GaussianSummary { mean: f32s(g.mean()), std: f32s(g.std()) }
}

fn latents(l: &LatentPair) -> Latents {
    Latents { y: f32s(&l.y), z: f32s(&l.z), y_source: l.y_source.clone(), z_source: l.z_source.clone() }
}

fn png_b64(t: &Translation) -> Result<String, ApiError> {
    Ok(B64.encode(encode_png(&t.image)?))
}

/// Resolves the source, then runs `f` on the blocking pool.
async fn with_session<T, F>(state: AppState, source: Source, seed: u64, f: F) -> Result<Json<T>, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&ModelBundle, &Session) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || {
        let session = state.resolve(&source)?;
        *session.last_seed.lock().expect("seed lock") = Some(seed);
        f(&state.0.bundle, &session).map(Json)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn meta(State(state): State<AppState>) -> Json<MetaResponse> {
    let b = &state.0.bundle;
    let [_, h, w, c] = b.arch.image_shape(1);
    Json(MetaResponse {
        domains: b
            .domains
            .iter()
            .map(|d| DomainInfo { id: d.id.clone(), role: if d.is_source { "source" } else { "target" }.into(), alpha: f32s(&d.alpha) })
            .collect(),
        source: b.source().id.clone(),
        targets: b.targets().iter().map(|d| d.id.clone()).collect(),
        style_dim: b.arch.style_dim,
        content_dim: b.arch.content_dim,
        image_shape: [h, w, c],
        checkpoint_id: state.0.checkpoint_id.clone(),
        dataset_size: state.0.dataset.as_ref().map(|d| d.len()),
    })
}

async fn create_session(State(state): State<AppState>, Body(req): Body<SessionRequest>) -> Result<Json<SessionResponse>, ApiError> {
    tokio::task::spawn_blocking(move || {
        let image = match (req.image, req.dataset_index) {
            (Some(img), None) => state.decode_image(&img)?,
            (None, Some(i)) => {
                let data = state.0.dataset.as_ref().ok_or_else(|| ApiError::invalid("this server has no dataset loaded"))?;
                if i >= data.len() {
                    return Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_image", format!("dataset index {i} out of range 0..{}", data.len())));
                }
                data.image(i)
            }
            _ => return Err(ApiError::invalid("give exactly one of image or dataset_index")),
        };
        let s = state.open(image)?;
        Ok(Json(SessionResponse { session_id: s.id.clone(), style: summary(&s.posterior.style), content: summary(&s.posterior.content) }))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn translate(State(state): State<AppState>, Body(req): Body<TranslateRequest>) -> Result<Json<TranslateResponse>, ApiError> {
    with_session(state, req.source, req.seed, move |bundle, s| {
        let t = translation::translate(bundle, &s.image, &req.target, &mut request_rng(req.seed))?;
        Ok(TranslateResponse {
            session_id: s.id.clone(),
            seed: req.seed,
            target: req.target,
            image: png_b64(&t)?,
            latents: latents(&t.latents),
            decoder: t.decoder,
        })
    })
    .await
}

async fn edit_style(State(state): State<AppState>, Body(req): Body<EditStyleRequest>) -> Result<Json<EditStyleResponse>, ApiError> {
    state.check_count("l", req.l)?;
    with_session(state, req.source, req.seed, move |bundle, s| {
        let out = translation::edit_styles(bundle, &s.image, &req.target, req.l, &mut request_rng(req.seed))?;
        Ok(EditStyleResponse {
            session_id: s.id.clone(),
            seed: req.seed,
            target: req.target,
            images: out.iter().map(png_b64).collect::<Result<_, _>>()?,
            y_list: out.iter().map(|t| f32s(&t.latents.y)).collect(),
            z: f32s(&out[0].latents.z),
            latents: out.iter().map(|t| latents(&t.latents)).collect(),
        })
    })
    .await
}

async fn edit_content(State(state): State<AppState>, Body(req): Body<EditContentRequest>) -> Result<Json<EditContentResponse>, ApiError> {
    state.check_count("m", req.m)?;
    with_session(state, req.source, req.seed, move |bundle, s| {
        let out = translation::edit_contents(bundle, &s.image, &req.target, req.m, &mut request_rng(req.seed))?;
        Ok(EditContentResponse {
            session_id: s.id.clone(),
            seed: req.seed,
            target: req.target,
            images: out.iter().map(png_b64).collect::<Result<_, _>>()?,
            z_list: out.iter().map(|t| f32s(&t.latents.z)).collect(),
            y: f32s(&out[0].latents.y),
            latents: out.iter().map(|t| latents(&t.latents)).collect(),
        })
    })
    .await
}

async fn mix(State(state): State<AppState>, Body(req): Body<MixRequest>) -> Result<Json<MixResponse>, ApiError> {
    with_session(state, req.source, req.seed, move |bundle, s| {
        let t = translation::mixed_translate(bundle, &s.image, &req.weights, &mut request_rng(req.seed))?;
        Ok(MixResponse {
            session_id: s.id.clone(),
            seed: req.seed,
            weights: req.weights,
            image: png_b64(&t)?,
            y: f32s(&t.latents.y),
            z: f32s(&t.latents.z),
            y_source: t.latents.y_source.clone(),
            chosen_decoder: t.decoder,
        })
    })
    .await
}

/// The full route table with CORS and body limits applied.
pub fn router(state: AppState) -> Router {
    let cfg = &state.0.config;
    let origin = match cfg.cors_origin.as_deref().map(HeaderValue::from_str) {
        Some(Ok(v)) => AllowOrigin::exact(v),
        _ => AllowOrigin::from(Any),
    };
    let cors = CorsLayer::new().allow_origin(origin).allow_methods(Any).allow_headers(Any);
    // room for base64 overhead plus the JSON envelope
    let body_limit = cfg.max_image_bytes / 3 * 4 + 64 * 1024;
    let api = Router::new()
        .route("/api/meta", get(meta))
        .route("/api/session", post(create_session))
        .route("/api/translate", post(translate))
        .route("/api/edit/style", post(edit_style))
        .route("/api/edit/content", post(edit_content))
        .route("/api/mix", post(mix));
    let app = match &cfg.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(DefaultBodyLimit::max(body_limit)).layer(cors).with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
