//! HTTP session service: upload, invert, edit with live previews, and final
//! rendering through the image-specific generator.
//!
//! All images travel as base64 PNG inside JSON. Long work (inversion,
//! preview fit, final render) runs on blocking threads; clients poll
//! `GET /sessions/{id}` and `GET /sessions/{id}/render`.

pub mod config;
pub mod error;
pub mod session;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use latentpaint_core::archive::Archive;
use latentpaint_core::editing::{
    stroke_to_region, strength_preset, EditMode, EditOp, RegionMask, StrengthLevel, StrokeMask, StyleGallery,
};
use latentpaint_core::generator::LatentCode;
use latentpaint_core::image::Image;
use latentpaint_core::pipeline::ModelBundle;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use config::ServiceConfig;
pub use error::ApiError;
use session::{run_render, run_setup, state_name, JobHandle, Progress, Session, SessionState};

/// Fraction of a latent cell's pixel block a stroke must cover to select it.
pub const STROKE_COVERAGE: f32 = 0.25;

type Shared = Arc<tokio::sync::Mutex<Session>>;

struct Inner {
    bundle: Arc<ModelBundle>,
    config: ServiceConfig,
    sessions: RwLock<BTreeMap<String, Shared>>,
    styles: RwLock<StyleGallery>,
    next_session: AtomicU64,
    next_job: AtomicU64,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Restores persisted sessions and styles, restarting interrupted setup
    /// jobs. Must be called inside a tokio runtime.
    pub fn new(bundle: ModelBundle, config: ServiceConfig) -> Self {
        let state = AppState(Arc::new(Inner {
            bundle: Arc::new(bundle),
            config,
            sessions: RwLock::new(BTreeMap::new()),
            styles: RwLock::new(StyleGallery::new()),
            next_session: AtomicU64::new(1),
            next_job: AtomicU64::new(1),
        }));
        state.restore();
        state
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.0.bundle
    }

    fn styles(&self) -> StyleGallery {
        self.0.styles.read().unwrap().clone()
    }

    fn session_dir(&self, id: &str) -> Option<PathBuf> {
        self.0.config.session_dir.as_ref().map(|d| d.join("sessions").join(id))
    }

    fn styles_dir(&self) -> Option<PathBuf> {
        self.0.config.session_dir.as_ref().map(|d| d.join("styles"))
    }

    fn restore(&self) {
        if let Some(dir) = self.styles_dir() {
            for e in fs::read_dir(&dir).into_iter().flatten().flatten() {
                let p = e.path();
                let Some(id) = p.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".arc")) else { continue };
                match Archive::load(&p).map_err(anyhow::Error::from).and_then(|a| Ok(LatentCode::from_archive(&a)?)) {
                    Ok(z) => {
                        self.0.styles.write().unwrap().insert(id.to_string(), z);
                    }
                    Err(e) => log::warn!("skipping style {}: {e}", p.display()),
                }
            }
        }
        let Some(root) = self.0.config.session_dir.as_ref().map(|d| d.join("sessions")) else { return };
        let mut dirs: Vec<PathBuf> = fs::read_dir(&root).into_iter().flatten().flatten().map(|e| e.path()).collect();
        dirs.sort();
        let styles = self.styles();
        for d in dirs {
            match Session::restore(&d, &self.0.bundle, &styles) {
                Ok(s) => {
                    if let Some(n) = s.id.strip_prefix('s').and_then(|n| u64::from_str_radix(n, 16).ok()) {
                        self.0.next_session.fetch_max(n + 1, Ordering::Relaxed);
                    }
                    let restart = s.state == SessionState::Inverting;
                    let id = s.id.clone();
                    let shared = Arc::new(tokio::sync::Mutex::new(s));
                    self.0.sessions.write().unwrap().insert(id.clone(), shared.clone());
                    if restart {
                        self.spawn_setup(shared);
                    }
                    log::info!("restored session {id}");
                }
                Err(e) => log::warn!("cannot restore session from {}: {e}", d.display()),
            }
        }
    }

    fn new_job(&self, steps: usize) -> JobHandle {
        JobHandle::new(self.0.next_job.fetch_add(1, Ordering::Relaxed), steps)
    }

    fn spawn_setup(&self, session: Shared) {
        let bundle = self.0.bundle.clone();
        let (refine, adapt) = (self.0.config.refine.clone(), self.0.config.adaptation.clone());
        let styles = self.styles();
        let job = self.new_job(refine.steps + adapt.preview_steps);
        tokio::task::spawn_blocking(move || run_setup(session, bundle, styles, refine, adapt, job));
    }

    fn session(&self, id: &str) -> Result<Shared, ApiError> {
        self.0.sessions.read().unwrap().get(id).cloned().ok_or_else(|| ApiError::not_found(format!("no session `{id}`")))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/edits", post(post_edit))
        .route("/sessions/{id}/edits/{eid}", delete(delete_edit))
        .route("/sessions/{id}/render", post(start_render).get(get_render).delete(cancel_render))
        .route("/catalog", get(get_catalog))
        .route("/styles", get(list_styles).post(add_style))
        .with_state(state)
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

fn decode_png(b64: &str) -> Result<Vec<u8>, ApiError> {
    let data = b64.split_once("base64,").map_or(b64, |(_, d)| d);
    B64.decode(data.trim()).map_err(|e| ApiError::bad_request(format!("image is not base64: {e}")))
}

fn encode_png(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

/// Decodes an uploaded PNG and checks it against the model's output size.
fn load_upload(bundle: &ModelBundle, b64: &str) -> Result<(Vec<u8>, Image), ApiError> {
    let bytes = decode_png(b64)?;
    let image = Image::from_png_bytes(&bytes).map_err(|e| ApiError::bad_request(format!("bad image: {e}")))?;
    let (h, w) = bundle.image_size();
    if image.dims() != (h, w) {
        return Err(ApiError::bad_request(format!(
            "image is {}x{} (width x height), model expects {w}x{h}",
            image.width(),
            image.height()
        )));
    }
    Ok((bytes, image))
}

#[derive(Deserialize)]
struct CreateSession {
    image: String,
    #[serde(default)]
    history: Vec<EditOp>,
    #[serde(default)]
    seed: u64,
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: CreateSession = parse_json(&body)?;
    let (bytes, image) = load_upload(&app.0.bundle, &req.image)?;
    let styles = app.styles();
    for op in &req.history {
        op.validate(&app.0.bundle.catalog, &styles).map_err(ApiError::invalid)?;
    }
    let shared = {
        let mut sessions = app.0.sessions.write().unwrap();
        if sessions.len() >= app.0.config.capacity {
            return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("server is at capacity ({} sessions)", app.0.config.capacity)));
        }
        let id = format!("s{:08x}", app.0.next_session.fetch_add(1, Ordering::Relaxed));
        let s = Session::new(id.clone(), bytes, image, req.seed, req.history, app.session_dir(&id));
        let shared = Arc::new(tokio::sync::Mutex::new(s));
        sessions.insert(id, shared.clone());
        shared
    };
    let id = shared.lock().await.id.clone();
    app.spawn_setup(shared);
    Ok((StatusCode::ACCEPTED, Json(json!({ "id": id, "state": "inverting" }))))
}

async fn list_sessions(State(app): State<AppState>) -> Json<Value> {
    let all: Vec<Shared> = app.0.sessions.read().unwrap().values().cloned().collect();
    let mut out = Vec::with_capacity(all.len());
    for s in all {
        let s = s.lock().await;
        out.push(json!({ "id": s.id, "state": s.state }));
    }
    Json(json!({ "sessions": out }))
}

#[derive(Serialize)]
struct SessionView<'a> {
    id: &'a str,
    state: SessionState,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inversion_psnr: Option<f64>,
    history: &'a [EditOp],
    #[serde(skip_serializing_if = "Option::is_none")]
    preview_png: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    progress: Option<Progress>,
    has_final: bool,
}

fn session_view(s: &Session) -> Value {
    serde_json::to_value(SessionView {
        id: &s.id,
        state: s.state,
        seed: s.seed,
        error: s.error.as_deref(),
        inversion_psnr: s.inversion_psnr,
        history: s.history(),
        preview_png: s.preview_png.as_deref().map(|p| encode_png(p)),
        progress: s.job.as_ref().map(JobHandle::progress),
        has_final: s.final_render.is_some(),
    })
    .expect("view serializes")
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let s = app.session(&id)?;
    let s = s.lock().await;
    Ok(Json(session_view(&s)))
}

async fn delete_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let shared = app.0.sessions.write().unwrap().remove(&id).ok_or_else(|| ApiError::not_found(format!("no session `{id}`")))?;
    let s = shared.lock().await;
    if let Some(j) = &s.job {
        j.cancel.store(true, Ordering::Relaxed);
    }
    if let Some(dir) = &s.dir {
        let _ = fs::remove_dir_all(dir);
    }
    Ok(StatusCode::NO_CONTENT)
}

/// An `EditOp`, or a pixel stroke plus a strength level in its place.
#[derive(Deserialize)]
struct EditRequest {
    mode: Option<EditMode>,
    class: ClassRef,
    region: Option<RegionMask>,
    stroke: Option<StrokeMask>,
    strength: Option<f32>,
    level: Option<StrengthLevel>,
    style_source: Option<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ClassRef {
    Id(u8),
    Name(String),
}

impl EditRequest {
    fn into_op(self, bundle: &ModelBundle) -> Result<EditOp, ApiError> {
        let class = match self.class {
            ClassRef::Id(c) => c,
            ClassRef::Name(n) => bundle.catalog.class_by_name(&n).map_err(ApiError::invalid)?.class,
        };
        let mode = self.mode.or(self.stroke.as_ref().map(|s| s.mode)).ok_or_else(|| ApiError::invalid("missing `mode`"))?;
        let region = match (self.region, self.stroke) {
            (Some(r), None) => r,
            (None, Some(s)) => stroke_to_region(&s, bundle.catalog.grid, STROKE_COVERAGE).map_err(ApiError::invalid)?,
            _ => return Err(ApiError::invalid("give exactly one of `region` and `stroke`")),
        };
        let strength = match self.strength {
            Some(v) => v,
            None => strength_preset(self.level.unwrap_or(StrengthLevel::Med), mode),
        };
        Ok(EditOp { id: 0, mode, class, region, strength, style_source: self.style_source })
    }
}

fn history_view(s: &Session) -> Value {
    json!({
        "history": s.history(),
        "preview_png": s.preview_png.as_deref().map(|p| encode_png(p)),
        "state": s.state,
    })
}

async fn post_edit(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let op = parse_json::<EditRequest>(&body)?.into_op(&app.0.bundle)?;
    let shared = app.session(&id)?;
    let guard = shared.lock_owned().await;
    let (bundle, styles) = (app.0.bundle.clone(), app.styles());
    let out = tokio::task::spawn_blocking(move || {
        let mut s = guard;
        let eid = s.push_edit(op, &bundle, &styles)?;
        let mut v = history_view(&s);
        v["edit_id"] = eid.into();
        Ok::<_, ApiError>(v)
    })
    .await??;
    Ok(Json(out))
}

async fn delete_edit(State(app): State<AppState>, Path((id, eid)): Path<(String, u64)>) -> Result<Json<Value>, ApiError> {
    let shared = app.session(&id)?;
    let guard = shared.lock_owned().await;
    let (bundle, styles) = (app.0.bundle.clone(), app.styles());
    let out = tokio::task::spawn_blocking(move || {
        let mut s = guard;
        s.delete_edit(eid, &bundle, &styles)?;
        Ok::<_, ApiError>(history_view(&s))
    })
    .await??;
    Ok(Json(out))
}

async fn start_render(State(app): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let shared = app.session(&id)?;
    let mut s = shared.clone().lock_owned().await;
    let cfg = app.0.config.adaptation.clone();
    let job = app.new_job(cfg.steps);
    let job_id = job.id;
    let (bundle, styles) = (app.0.bundle.clone(), app.styles());
    let (input, s) = tokio::task::spawn_blocking(move || {
        let input = s.begin_render(&bundle, &styles, &cfg, job);
        (input, s)
    })
    .await?;
    match input? {
        None => Ok((StatusCode::OK, Json(json!({ "job": Value::Null, "state": s.state, "cached": true })))),
        Some(input) => {
            let job = s.job.clone().expect("render job registered");
            drop(s);
            let bundle = app.0.bundle.clone();
            tokio::task::spawn_blocking(move || run_render(shared, bundle, input, job));
            Ok((StatusCode::ACCEPTED, Json(json!({ "job": job_id, "state": "adapting", "cached": false }))))
        }
    }
}

async fn get_render(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let shared = app.session(&id)?;
    let s = shared.lock().await;
    let mut v = json!({ "state": s.state });
    if let Some(j) = &s.job {
        v["job"] = j.id.into();
        v["progress"] = serde_json::to_value(j.progress()).expect("progress serializes");
    }
    if let Some(e) = &s.error {
        v["error"] = e.as_str().into();
    }
    if s.state == SessionState::Done {
        if let Some(f) = &s.final_render {
            v["image_png"] = encode_png(&f.png).into();
            v["loss_trace"] = json!(f.loss_trace);
            v["outside_psnr"] = json!(f.outside_psnr);
        }
    }
    Ok(Json(v))
}

async fn cancel_render(State(app): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let shared = app.session(&id)?;
    let s = shared.lock().await;
    match (&s.job, s.state) {
        (Some(j), SessionState::Adapting) => {
            j.cancel.store(true, Ordering::Relaxed);
            Ok((StatusCode::ACCEPTED, Json(json!({ "state": s.state, "cancelling": j.id }))))
        }
        _ => Err(ApiError::conflict(format!("no render in progress (session is {})", state_name(s.state)))),
    }
}

async fn get_catalog(State(app): State<AppState>) -> Json<Value> {
    let b = &app.0.bundle;
    let (h, w) = b.image_size();
    let classes: Vec<Value> = b
        .catalog
        .classes
        .iter()
        .map(|c| {
            let units = c.selected();
            let best = units.iter().map(|&u| c.iou[u]).fold(0.0f32, f32::max);
            json!({ "id": c.class, "name": c.name, "units": units, "best_iou": best })
        })
        .collect();
    let levels = [StrengthLevel::Low, StrengthLevel::Med, StrengthLevel::High];
    let strengths: serde_json::Map<String, Value> = [EditMode::Draw, EditMode::Erase, EditMode::Restyle]
        .into_iter()
        .map(|m| {
            let per: serde_json::Map<String, Value> = levels
                .iter()
                .map(|&l| (serde_json::to_value(l).unwrap().as_str().unwrap().to_string(), json!(strength_preset(l, m))))
                .collect();
            (serde_json::to_value(m).unwrap().as_str().unwrap().to_string(), Value::Object(per))
        })
        .collect();
    Json(json!({
        "checkpoint_id": b.checkpoint_id(),
        "image_size": [h, w],
        "grid": [b.catalog.grid.0, b.catalog.grid.1],
        "edit_boundary": b.catalog.config.boundary,
        "classes": classes,
        "strengths": strengths,
        "stroke_coverage": STROKE_COVERAGE,
    }))
}

async fn list_styles(State(app): State<AppState>) -> Json<Value> {
    let ids: Vec<String> = app.0.styles.read().unwrap().keys().cloned().collect();
    Json(json!({ "styles": ids }))
}

#[derive(Deserialize)]
struct AddStyle {
    id: String,
    image: String,
}

/// Inverts a reference image and stores its code under `id`.
async fn add_style(State(app): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: AddStyle = parse_json(&body)?;
    if req.id.is_empty() || req.id.len() > 64 || !req.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(ApiError::invalid("style id must be 1-64 characters of [A-Za-z0-9_-]"));
    }
    let (_, image) = load_upload(&app.0.bundle, &req.image)?;
    let bundle = app.0.bundle.clone();
    let refine = app.0.config.refine.clone();
    let z = tokio::task::spawn_blocking(move || bundle.invert(&image, &refine)).await?.map_err(ApiError::internal)?.z;
    if let Some(dir) = app.styles_dir() {
        if let Err(e) = fs::create_dir_all(&dir).map_err(anyhow::Error::from).and_then(|_| Ok(z.to_archive().save(dir.join(format!("{}.arc", req.id)))?)) {
            log::warn!("cannot persist style {}: {e}", req.id);
        }
    }
    app.0.styles.write().unwrap().insert(req.id.clone(), z);
    Ok((StatusCode::CREATED, Json(json!({ "id": req.id }))))
}
