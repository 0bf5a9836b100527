//! HTTP inference service: volume upload, slice rendering and automatic or
//! prompted segmentation of single slices.

use std::collections::HashMap;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use candle_core::{Device, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use crate::checkpoint::{file_hash, ModelBundle};
use crate::depth3d::{compute_depth_attention, prepare_lowres, AttentionConfig, DepthModel};
use crate::error::{Error, Result};
use crate::inference::{logits_to_masks, slice_batch};
use crate::prompting::Prompt;
use crate::sam2d::{ForwardOptions, SegModel};
use crate::volume::{decode_upload, extract_slice, Volume};

/// Upper bound on an uploaded archive.
pub const MAX_UPLOAD_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub bind_addr: String,
    pub model_path: Option<PathBuf>,
    pub model3d_path: Option<PathBuf>,
    pub attention: AttentionConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind_addr: "127.0.0.1:8080".into(),
            model_path: None,
            model3d_path: None,
            attention: AttentionConfig::default(),
        }
    }
}

impl ServiceConfig {
    /// Overrides fields from `BIND_ADDR`, `MODEL_PATH` and `MODEL3D_PATH`.
    pub fn with_env(mut self) -> Self {
        if let Ok(v) = std::env::var("BIND_ADDR") {
            self.bind_addr = v;
        }
        if let Ok(v) = std::env::var("MODEL_PATH") {
            self.model_path = Some(v.into());
        }
        if let Ok(v) = std::env::var("MODEL3D_PATH") {
            self.model3d_path = Some(v.into());
        }
        self
    }
}

pub struct LoadedModel {
    pub model: SegModel,
    pub bundle: ModelBundle,
    pub hash: String,
    pub path: Option<PathBuf>,
}

pub struct LoadedDepthModel {
    pub model: DepthModel,
    pub hash: String,
    pub path: Option<PathBuf>,
}

impl LoadedModel {
    pub fn from_file(path: &Path, device: &Device) -> Result<Self> {
        let bundle = ModelBundle::load(path)?;
        Ok(LoadedModel {
            model: SegModel::from_bundle(&bundle, device)?,
            hash: file_hash(path)?,
            bundle,
            path: Some(path.to_path_buf()),
        })
    }
}

impl LoadedDepthModel {
    pub fn from_file(path: &Path, device: &Device) -> Result<Self> {
        let bundle = ModelBundle::load(path)?;
        Ok(LoadedDepthModel {
            model: DepthModel::from_bundle(&bundle, device)?,
            hash: file_hash(path)?,
            path: Some(path.to_path_buf()),
        })
    }
}

/// An uploaded volume and its probability volume, keyed by the 3D bundle
/// hash that produced it.
pub struct Session {
    pub volume: Volume,
    probability: Mutex<Option<(String, Arc<Array3<f64>>)>>,
}

impl Session {
    fn new(volume: Volume) -> Self {
        Session {
            volume,
            probability: Mutex::new(None),
        }
    }

    /// Computes the probability volume on first use and again whenever the
    /// 3D bundle changes.
    fn probability(&self, m: &LoadedDepthModel) -> Result<Arc<Array3<f64>>> {
        let mut slot = self.probability.lock().expect("session lock poisoned");
        if let Some((hash, p)) = slot.as_ref() {
            if *hash == m.hash {
                return Ok(p.clone());
            }
        }
        let (low, _) = prepare_lowres(&self.volume, None, m.model.cfg.size)?;
        let p = Arc::new(m.model.predict(&low.data)?);
        *slot = Some((m.hash.clone(), p.clone()));
        Ok(p)
    }

    pub fn cached_probability_hash(&self) -> Option<String> {
        self.probability
            .lock()
            .expect("session lock poisoned")
            .as_ref()
            .map(|(h, _)| h.clone())
    }
}

pub struct AppState {
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    next_id: AtomicU64,
    model: RwLock<Option<Arc<LoadedModel>>>,
    model3d: RwLock<Option<Arc<LoadedDepthModel>>>,
    pub attention: AttentionConfig,
}

impl AppState {
    pub fn new(attention: AttentionConfig) -> Self {
        AppState {
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            model: RwLock::new(None),
            model3d: RwLock::new(None),
            attention,
        }
    }

    pub fn from_config(cfg: &ServiceConfig, device: &Device) -> Result<Self> {
        cfg.attention.validate()?;
        let state = AppState::new(cfg.attention);
        if let Some(p) = &cfg.model_path {
            state.set_model(Some(LoadedModel::from_file(p, device)?));
        }
        if let Some(p) = &cfg.model3d_path {
            state.set_model3d(Some(LoadedDepthModel::from_file(p, device)?));
        }
        Ok(state)
    }

    /// Swaps the 2D model. Blocks until in-flight segmentations finish.
    pub fn set_model(&self, m: Option<LoadedModel>) {
        *self.model.write().expect("model lock poisoned") = m.map(Arc::new);
    }

    /// Swaps the 3D model; cached probability volumes of the old one are
    /// recomputed on next use.
    pub fn set_model3d(&self, m: Option<LoadedDepthModel>) {
        *self.model3d.write().expect("model lock poisoned") = m.map(Arc::new);
    }

    pub fn insert_volume(&self, v: Volume) -> String {
        let id = format!("vol-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        self.sessions
            .write()
            .expect("session map poisoned")
            .insert(id.clone(), Arc::new(Session::new(v)));
        id
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.read().expect("session map poisoned").get(id).cloned()
    }
}

/// An error response with a JSON body `{"error": message}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Prompt(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::OutOfRange { .. } => StatusCode::RANGE_NOT_SATISFIABLE,
            Error::Header { .. } | Error::SizeMismatch { .. } | Error::NonFinite { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<candle_core::Error> for ApiError {
    fn from(e: candle_core::Error) -> Self {
        Error::from(e).into()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Row-major run-length encoding of the nonzero pixels as `[start, length]`.
pub fn rle_encode(mask: &[u8]) -> Vec<[usize; 2]> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &v) in mask.iter().enumerate() {
        match (v != 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push([s, i - s]);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push([s, mask.len() - s]);
    }
    runs
}

/// Inverse of [`rle_encode`]. Runs must be nonempty, ordered, disjoint and
/// inside `len`.
pub fn rle_decode(runs: &[[usize; 2]], len: usize) -> Result<Vec<u8>> {
    let mut out = vec![0u8; len];
    let mut end = 0;
    for (i, &[s, n]) in runs.iter().enumerate() {
        if n == 0 || (i > 0 && s < end) || s.checked_add(n).map_or(true, |e| e > len) {
            return Err(Error::Invalid(format!("bad run [{s}, {n}] for length {len}")));
        }
        out[s..s + n].fill(1);
        end = s + n;
    }
    Ok(out)
}

/// 8-bit grayscale PNG of a slice, windowed to its own min and max.
pub fn render_slice_png(slice: &Array2<f32>) -> Result<Vec<u8>> {
    let (h, w) = slice.dim();
    let lo = slice.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = slice.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    let px: Vec<u8> = slice
        .iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range * 255.0).round() as u8 } else { 0 })
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, px)
        .ok_or_else(|| Error::Shape(format!("{h}x{w} slice")))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Invalid(format!("png encoding: {e}")))?;
    Ok(out.into_inner())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub volume_id: String,
    pub slice_index: usize,
    pub mode: String,
    #[serde(default)]
    pub prompts: Option<serde_json::Value>,
    #[serde(default)]
    pub use_depth_attention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask_rle: Vec<[usize; 2]>,
    pub shape: [usize; 2],
    pub latency_ms: f64,
    pub gate_g: f64,
}

impl SegmentResponse {
    pub fn mask(&self) -> Result<Array2<u8>> {
        let [h, w] = self.shape;
        Array2::from_shape_vec((h, w), rle_decode(&self.mask_rle, h * w)?).map_err(|e| Error::Shape(e.to_string()))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/volumes", post(upload_volume))
        .route("/v1/volumes/{id}/slices/{k}", get(slice_png))
        .route("/v1/segment", post(segment))
        .route("/v1/model", get(model_info))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn upload_volume(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let v = decode_upload(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let [d, h, w] = v.shape();
    let id = state.insert_volume(v);
    tracing::info!(volume_id = %id, depth = d, height = h, width = w, "volume uploaded");
    Ok(Json(json!({ "volume_id": id, "depth": d, "height": h, "width": w })))
}

fn lookup(state: &AppState, id: &str, k: usize) -> ApiResult<Arc<Session>> {
    let s = state
        .session(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown volume {id}")))?;
    let d = s.volume.depth();
    if k >= d {
        return Err(ApiError::new(
            StatusCode::RANGE_NOT_SATISFIABLE,
            format!("slice {k} out of range for depth {d}"),
        ));
    }
    Ok(s)
}

async fn slice_png(
    State(state): State<Arc<AppState>>,
    UrlPath((id, k)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    if state.session(&id).is_none() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown volume {id}")));
    }
    let k: usize = k
        .parse()
        .map_err(|_| ApiError::new(StatusCode::RANGE_NOT_SATISFIABLE, format!("bad slice index {k:?}")))?;
    let s = lookup(&state, &id, k)?;
    let png = render_slice_png(&extract_slice(&s.volume, k)?)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

fn parse_prompts(req: &SegmentRequest, native: (usize, usize)) -> ApiResult<Option<Prompt>> {
    let unprocessable = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m);
    match (req.mode.as_str(), &req.prompts) {
        ("auto", None) | ("auto", Some(serde_json::Value::Null)) => Ok(None),
        ("auto", Some(_)) => Err(unprocessable("prompts are only accepted in prompt mode".into())),
        ("prompt", None) | ("prompt", Some(serde_json::Value::Null)) => {
            Err(unprocessable("prompt mode needs prompts".into()))
        }
        ("prompt", Some(v)) => {
            let p: Prompt = serde_json::from_value(v.clone()).map_err(|e| unprocessable(format!("malformed prompts: {e}")))?;
            p.validate(native.0, native.1)?;
            Ok(Some(p))
        }
        (m, _) => Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unknown mode {m:?}"))),
    }
}

/// Runs one segmentation request synchronously.
pub fn segment_blocking(state: &AppState, req: &SegmentRequest) -> ApiResult<SegmentResponse> {
    let guard = state.model.read().expect("model lock poisoned");
    let loaded = guard
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"))?;
    let session = lookup(state, &req.volume_id, req.slice_index)?;
    let [_, h, w] = session.volume.shape();
    let prompt = parse_prompts(req, (h, w))?;
    let guard3d = state.model3d.read().expect("model lock poisoned");
    if req.use_depth_attention && guard3d.is_none() {
        return Err(ApiError::new(StatusCode::CONFLICT, "depth attention requested but no 3D model is loaded"));
    }

    let t0 = Instant::now();
    let model = &loaded.model;
    let k = req.slice_index;
    let s = model.input_size();
    let (attention, opts) = match guard3d.as_ref().filter(|_| req.use_depth_attention) {
        Some(m3) => {
            let p = session.probability(m3)?;
            let a = compute_depth_attention(p.view(), k, session.volume.depth(), &state.attention)?;
            let (ah, aw) = a.dim();
            let t = Tensor::from_iter(a.iter().map(|&v| v as f32), &model.device)?
                .reshape((1, ah, aw))?
                .to_dtype(model.dtype)?;
            (Some(t), ForwardOptions::default())
        }
        None => (
            None,
            ForwardOptions {
                gate_override: Some(1.0),
                ..Default::default()
            },
        ),
    };
    let x = slice_batch(&session.volume, &[k], s, &model.device, model.dtype)?;
    let scaled = prompt.map(|p| p.rescaled((h, w), (s, s)));
    let logits = model.forward(&x, &[scaled.as_ref()], attention.as_ref(), opts)?;
    let mask = logits_to_masks(&logits, (h, w))?.remove(0);
    let gate_g = match opts.gate_override {
        Some(g) => g,
        None => model.gate()?,
    };
    let latency_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok(SegmentResponse {
        mask_rle: rle_encode(mask.as_slice().expect("standard layout")),
        shape: [h, w],
        latency_ms,
        gate_g,
    })
}

async fn segment(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<SegmentResponse>> {
    let req: SegmentRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))?;
    let out = tokio::task::spawn_blocking(move || segment_blocking(&state, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    tracing::info!(latency_ms = out.latency_ms, gate_g = out.gate_g, "segmented");
    Ok(Json(out))
}

async fn model_info(State(state): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    let guard = state.model.read().expect("model lock poisoned");
    let m = guard
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"))?;
    let m3 = state.model3d.read().expect("model lock poisoned");
    Ok(Json(json!({
        "bundle_hash": m.hash,
        "path": m.path,
        "config": m.bundle.config,
        "stage": m.bundle.stage,
        "history": m.bundle.history,
        "seed": m.bundle.seed,
        "meta": m.bundle.meta,
        "gate_g": m.model.gate()?,
        "model3d": m3.as_ref().map(|d| json!({ "bundle_hash": d.hash, "path": d.path, "config": d.model.cfg })),
    })))
}

/// Binds and serves until ctrl-c.
pub async fn serve(cfg: ServiceConfig) -> Result<()> {
    let state = Arc::new(AppState::from_config(&cfg, &Device::Cpu)?);
    let addr: SocketAddr = cfg
        .bind_addr
        .parse()
        .map_err(|e| Error::Invalid(format!("bind address {:?}: {e}", cfg.bind_addr)))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(Path::new(&cfg.bind_addr), e))?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(Path::new(&cfg.bind_addr), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth3d::VNetConfig;
    use crate::inference::predict_volume;
    use crate::sam2d::ModelConfig;
    use crate::volume::encode_upload;
    use axum::body::Body;
    use axum::http::Request;
    use candle_core::DType;
    use http_body_util::BodyExt;
    use proptest::prelude::*;
    use tower::ServiceExt;

    fn volume() -> Volume {
        let data = Array3::from_shape_fn((4, 12, 10), |(d, h, w)| {
            if (3..9).contains(&h) && (2..6).contains(&w) { 100.0 + d as f32 } else { (h * w) as f32 * 0.1 }
        });
        Volume::new(data, [2.0, 1.0, 1.0]).unwrap()
    }

    fn saved_model(dir: &Path) -> PathBuf {
        let m = SegModel::new(&ModelConfig::tiny(32), 3, DType::F32, &Device::Cpu).unwrap();
        let p = dir.join("model.bin");
        m.to_bundle("FUSION", 3).unwrap().save(&p).unwrap();
        p
    }

    fn saved_model3d(dir: &Path) -> PathBuf {
        let cfg = VNetConfig { size: 16, base_channels: 2, levels: 3 };
        let m = DepthModel::new(&cfg, 5, DType::F32, &Device::Cpu).unwrap();
        let p = dir.join("vnet.bin");
        m.to_bundle("V3D", 5).unwrap().save(&p).unwrap();
        p
    }

    fn state(dir: &Path, with2d: bool, with3d: bool) -> Arc<AppState> {
        let cfg = ServiceConfig {
            model_path: with2d.then(|| saved_model(dir)),
            model3d_path: with3d.then(|| saved_model3d(dir)),
            ..Default::default()
        };
        Arc::new(AppState::from_config(&cfg, &Device::Cpu).unwrap())
    }

    async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
        let res = app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    fn post(uri: &str, body: impl Into<Body>) -> Request<Body> {
        Request::post(uri).body(body.into()).unwrap()
    }

    fn get_req(uri: &str) -> Request<Body> {
        Request::get(uri).body(Body::empty()).unwrap()
    }

    async fn upload(app: &Router, v: &Volume) -> String {
        let (st, body) = call(app, post("/v1/volumes", encode_upload(v))).await;
        assert_eq!(st, StatusCode::OK);
        let j: serde_json::Value = serde_json::from_slice(&body).unwrap();
        j["volume_id"].as_str().unwrap().to_string()
    }

    async fn segment_json(app: &Router, req: serde_json::Value) -> (StatusCode, Vec<u8>) {
        call(app, post("/v1/segment", serde_json::to_vec(&req).unwrap())).await
    }

    #[tokio::test]
    async fn upload_reports_shape_and_never_dedups() {
        let dir = tempfile::tempdir().unwrap();
        let app = router(state(dir.path(), false, false));
        let zeros = Volume::new(Array3::zeros((4, 4, 4)), [1.0; 3]).unwrap();
        let body = encode_upload(&zeros);
        let (st, out) = call(&app, post("/v1/volumes", body.clone())).await;
        assert_eq!(st, StatusCode::OK);
        let j: serde_json::Value = serde_json::from_slice(&out).unwrap();
        assert_eq!((j["depth"].as_u64(), j["height"].as_u64(), j["width"].as_u64()), (Some(4), Some(4), Some(4)));
        let (_, again) = call(&app, post("/v1/volumes", body.clone())).await;
        let j2: serde_json::Value = serde_json::from_slice(&again).unwrap();
        assert_ne!(j["volume_id"], j2["volume_id"]);
        let (st, _) = call(&app, post("/v1/volumes", body[..body.len() - 3].to_vec())).await;
        assert_eq!(st, StatusCode::BAD_REQUEST);
    }

    #[tokio::test]
    async fn slice_rendering() {
        let dir = tempfile::tempdir().unwrap();
        let app = router(state(dir.path(), false, false));
        let constant = Volume::new(Array3::from_elem((2, 5, 7), 3.5), [1.0; 3]).unwrap();
        let id = upload(&app, &constant).await;
        let (st, png) = call(&app, get_req(&format!("/v1/volumes/{id}/slices/1"))).await;
        assert_eq!(st, StatusCode::OK);
        let img = image::load_from_memory(&png).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (7, 5));
        assert!(img.pixels().all(|p| p.0[0] == img.get_pixel(0, 0).0[0]));
        let (_, png2) = call(&app, get_req(&format!("/v1/volumes/{id}/slices/1"))).await;
        assert_eq!(png, png2);
        assert_eq!(call(&app, get_req(&format!("/v1/volumes/{id}/slices/2"))).await.0, StatusCode::RANGE_NOT_SATISFIABLE);
        assert_eq!(call(&app, get_req(&format!("/v1/volumes/{id}/slices/x"))).await.0, StatusCode::RANGE_NOT_SATISFIABLE);
        assert_eq!(call(&app, get_req("/v1/volumes/nope/slices/0")).await.0, StatusCode::NOT_FOUND);

        let id = upload(&app, &volume()).await;
        let (_, png) = call(&app, get_req(&format!("/v1/volumes/{id}/slices/0"))).await;
        let img = image::load_from_memory(&png).unwrap().to_luma8();
        let vals: Vec<u8> = img.pixels().map(|p| p.0[0]).collect();
        assert_eq!(vals.iter().max(), Some(&255));
        assert_eq!(vals.iter().min(), Some(&0));
    }

    #[tokio::test]
    async fn model_endpoint() {
        let dir = tempfile::tempdir().unwrap();
        let app = router(state(dir.path(), false, false));
        assert_eq!(call(&app, get_req("/v1/model")).await.0, StatusCode::SERVICE_UNAVAILABLE);
        let app = router(state(dir.path(), true, false));
        let (st, body) = call(&app, get_req("/v1/model")).await;
        assert_eq!(st, StatusCode::OK);
        let j: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(j["bundle_hash"], file_hash(dir.path().join("model.bin")).unwrap());
        assert_eq!(j["stage"], "FUSION");
        let cfg: ModelConfig = serde_json::from_value(j["config"].clone()).unwrap();
        assert_eq!(cfg, ModelConfig::tiny(32));
        assert!(j["model3d"].is_null());
    }

    #[tokio::test]
    async fn segmentation_status_codes() {
        let dir = tempfile::tempdir().unwrap();
        let st_none = state(dir.path(), false, false);
        let app = router(st_none.clone());
        let id = upload(&app, &volume()).await;
        let auto = json!({"volume_id": id, "slice_index": 0, "mode": "auto", "use_depth_attention": false});
        assert_eq!(segment_json(&app, auto.clone()).await.0, StatusCode::SERVICE_UNAVAILABLE);

        let app = router(state(dir.path(), true, false));
        let id = upload(&app, &volume()).await;
        let req = |v: serde_json::Value| {
            let mut base = json!({"volume_id": id, "slice_index": 1, "mode": "auto", "use_depth_attention": false});
            for (k, x) in v.as_object().unwrap() {
                base[k] = x.clone();
            }
            base
        };
        assert_eq!(segment_json(&app, req(json!({}))).await.0, StatusCode::OK);
        assert_eq!(segment_json(&app, req(json!({"volume_id": "nope"}))).await.0, StatusCode::NOT_FOUND);
        assert_eq!(segment_json(&app, req(json!({"slice_index": 4}))).await.0, StatusCode::RANGE_NOT_SATISFIABLE);
        assert_eq!(segment_json(&app, req(json!({"mode": "prompt"}))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(
            segment_json(&app, req(json!({"prompts": {"points": [[1, 1]]}}))).await.0,
            StatusCode::UNPROCESSABLE_ENTITY
        );
        for bad in [json!({"points": [[10, 1]]}), json!({"box": [5, 5, 2, 8]}), json!({"dots": 1}), json!({"points": []})] {
            assert_eq!(
                segment_json(&app, req(json!({"mode": "prompt", "prompts": bad}))).await.0,
                StatusCode::UNPROCESSABLE_ENTITY
            );
        }
        assert_eq!(
            segment_json(&app, req(json!({"mode": "prompt", "prompts": {"box": [1, 2, 6, 9]}}))).await.0,
            StatusCode::OK
        );
        assert_eq!(segment_json(&app, req(json!({"use_depth_attention": true}))).await.0, StatusCode::CONFLICT);
        let (st, _) = call(&app, post("/v1/segment", "{not json")).await;
        assert_eq!(st, StatusCode::BAD_REQUEST);
    }

    #[tokio::test]
    async fn automatic_mask_matches_direct_inference() {
        let dir = tempfile::tempdir().unwrap();
        let st = state(dir.path(), true, false);
        let app = router(st.clone());
        let v = volume();
        let id = upload(&app, &v).await;
        let direct = {
            let g = st.model.read().unwrap();
            predict_volume(&g.as_ref().unwrap().model, &v, &vec![None; 4], None, ForwardOptions::default(), 1).unwrap()
        };
        for k in 0..4 {
            let body = json!({"volume_id": id, "slice_index": k, "mode": "auto", "use_depth_attention": false});
            let (code, a) = segment_json(&app, body.clone()).await;
            assert_eq!(code, StatusCode::OK);
            let (_, b) = segment_json(&app, body).await;
            let ra: SegmentResponse = serde_json::from_slice(&a).unwrap();
            let rb: SegmentResponse = serde_json::from_slice(&b).unwrap();
            assert_eq!(ra.mask_rle, rb.mask_rle);
            assert_eq!(ra.shape, [12, 10]);
            assert_eq!(ra.gate_g, 1.0);
            assert_eq!(ra.mask().unwrap(), direct.index_axis(ndarray::Axis(0), k));
        }
    }

    #[tokio::test]
    async fn depth_attention_caches_probability_per_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let st = state(dir.path(), true, true);
        let app = router(st.clone());
        let id = upload(&app, &volume()).await;
        let session = st.session(&id).unwrap();
        assert!(session.cached_probability_hash().is_none());
        let body = json!({"volume_id": id, "slice_index": 2, "mode": "auto", "use_depth_attention": true});
        let (code, out) = segment_json(&app, body.clone()).await;
        assert_eq!(code, StatusCode::OK, "{}", String::from_utf8_lossy(&out));
        let r: SegmentResponse = serde_json::from_slice(&out).unwrap();
        let g = st.model.read().unwrap().as_ref().unwrap().model.gate().unwrap();
        assert_eq!(r.gate_g, g);
        let hash = file_hash(dir.path().join("vnet.bin")).unwrap();
        assert_eq!(session.cached_probability_hash(), Some(hash));

        // A different 3D bundle invalidates the cache.
        let cfg = VNetConfig { size: 16, base_channels: 2, levels: 3 };
        let other = DepthModel::new(&cfg, 99, DType::F32, &Device::Cpu).unwrap();
        let p = dir.path().join("vnet2.bin");
        other.to_bundle("V3D", 99).unwrap().save(&p).unwrap();
        st.set_model3d(Some(LoadedDepthModel::from_file(&p, &Device::Cpu).unwrap()));
        let (code, _) = segment_json(&app, body).await;
        assert_eq!(code, StatusCode::OK);
        assert_eq!(session.cached_probability_hash(), Some(file_hash(&p).unwrap()));
    }

    #[test]
    fn rle_examples() {
        assert_eq!(rle_encode(&[0, 1, 1, 0, 1]), vec![[1, 2], [4, 1]]);
        assert_eq!(rle_encode(&[0, 0]), Vec::<[usize; 2]>::new());
        assert_eq!(rle_encode(&[1, 1]), vec![[0, 2]]);
        assert!(rle_decode(&[[0, 3]], 2).is_err());
        assert!(rle_decode(&[[2, 1], [0, 1]], 4).is_err());
        assert!(rle_decode(&[[1, 0]], 4).is_err());
    }

    proptest! {
        #[test]
        fn rle_is_an_exact_inverse(mask in proptest::collection::vec(0u8..2, 0..400)) {
            let runs = rle_encode(&mask);
            prop_assert_eq!(rle_decode(&runs, mask.len()).unwrap(), mask.clone());
            prop_assert_eq!(runs.iter().map(|r| r[1]).sum::<usize>(), mask.iter().filter(|&&v| v != 0).count());
        }
    }
}
