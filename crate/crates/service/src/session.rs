//! Per-session state machine. Methods here block; callers run them off the
//! async executor with the session lock held.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use latentpaint_core::adaptation::{
    edit_pixel_mask, fit_preview_generator, optimize_adaptation, AdaptError, AdaptationConfig, WeightAdaptedGenerator,
};
use latentpaint_core::archive::{hex_digest, Archive};
use latentpaint_core::editing::{EditOp, EditStack, StyleGallery};
use latentpaint_core::generator::{LatentCode, LayeredGenerator};
use latentpaint_core::image::{psnr, Image};
use latentpaint_core::inversion::RefineConfig;
use latentpaint_core::pipeline::ModelBundle;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Inverting,
    PreviewFitting,
    Ready,
    Adapting,
    Done,
    Error,
}

impl SessionState {
    /// States in which the edit stack may change or a render may start.
    pub fn is_idle(self) -> bool {
        matches!(self, SessionState::Ready | SessionState::Done)
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct Progress {
    pub step: usize,
    pub steps: usize,
    pub best_loss: f64,
}

/// A running setup or render job.
#[derive(Clone, Debug)]
pub struct JobHandle {
    pub id: u64,
    pub cancel: Arc<AtomicBool>,
    pub progress: Arc<Mutex<Progress>>,
}

impl JobHandle {
    pub fn new(id: u64, steps: usize) -> Self {
        Self {
            id,
            cancel: Arc::new(AtomicBool::new(false)),
            progress: Arc::new(Mutex::new(Progress { step: 0, steps, best_loss: f64::NAN })),
        }
    }

    pub fn progress(&self) -> Progress {
        *self.progress.lock().unwrap()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinalRender {
    pub key: String,
    #[serde(skip)]
    pub png: Arc<Vec<u8>>,
    pub loss_trace: Vec<f64>,
    pub outside_psnr: f64,
}

pub struct Session {
    pub id: String,
    pub seed: u64,
    /// Uploaded bytes, kept verbatim.
    pub image_png: Arc<Vec<u8>>,
    pub image: Image,
    pub state: SessionState,
    pub error: Option<String>,
    pub inversion_psnr: Option<f64>,
    pub z: Option<LatentCode>,
    pub preview_gen: Option<Arc<WeightAdaptedGenerator>>,
    pub stack: Option<EditStack>,
    /// History to replay once setup finishes.
    pub pending_history: Vec<EditOp>,
    pub preview_png: Option<Arc<Vec<u8>>>,
    pub final_render: Option<FinalRender>,
    pub job: Option<JobHandle>,
    pub dir: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    id: String,
    seed: u64,
    state: SessionState,
    error: Option<String>,
    inversion_psnr: Option<f64>,
    ops: Vec<EditOp>,
    next_id: u64,
    pending_history: Vec<EditOp>,
    final_render: Option<FinalRender>,
}

impl Session {
    pub fn new(id: String, image_png: Vec<u8>, image: Image, seed: u64, history: Vec<EditOp>, dir: Option<PathBuf>) -> Self {
        Self {
            id,
            seed,
            image_png: Arc::new(image_png),
            image,
            state: SessionState::Inverting,
            error: None,
            inversion_psnr: None,
            z: None,
            preview_gen: None,
            stack: None,
            pending_history: history,
            preview_png: None,
            final_render: None,
            job: None,
            dir,
        }
    }

    pub fn history(&self) -> &[EditOp] {
        self.stack.as_ref().map_or(&self.pending_history[..], |s| s.ops())
    }

    pub fn require_idle(&self) -> Result<(), ApiError> {
        if self.state.is_idle() {
            Ok(())
        } else {
            Err(ApiError::conflict(format!("session is {}", state_name(self.state))))
        }
    }

    fn fail(&mut self, msg: String) {
        log::warn!("session {}: {msg}", self.id);
        self.state = SessionState::Error;
        self.error = Some(msg);
        self.job = None;
    }

    /// Appends an edit and re-renders the preview.
    pub fn push_edit(&mut self, op: EditOp, bundle: &ModelBundle, styles: &StyleGallery) -> Result<u64, ApiError> {
        self.require_idle()?;
        let stack = self.stack.as_mut().expect("idle sessions have a stack");
        let id = stack.push(op, &bundle.catalog, styles).map_err(ApiError::invalid)?;
        self.after_stack_change(bundle, styles)?;
        Ok(id)
    }

    pub fn delete_edit(&mut self, edit_id: u64, bundle: &ModelBundle, styles: &StyleGallery) -> Result<(), ApiError> {
        self.require_idle()?;
        let stack = self.stack.as_mut().expect("idle sessions have a stack");
        stack.remove(edit_id).map_err(|e| ApiError::not_found(e.to_string()))?;
        self.after_stack_change(bundle, styles)
    }

    fn after_stack_change(&mut self, bundle: &ModelBundle, styles: &StyleGallery) -> Result<(), ApiError> {
        self.render_preview(bundle, styles)?;
        // A finished render no longer matches the stack.
        self.state = SessionState::Ready;
        self.persist();
        Ok(())
    }

    /// `G′_w(z_e)` for the current stack.
    pub fn render_preview(&mut self, bundle: &ModelBundle, styles: &StyleGallery) -> Result<(), ApiError> {
        let gw = self.preview_gen.clone().expect("preview generator fitted");
        let stack = self.stack.as_mut().expect("stack present");
        let z_e = stack.replay(&bundle.catalog, styles).map_err(ApiError::invalid)?;
        let img = gw.render(&z_e).map_err(ApiError::internal)?;
        self.preview_png = Some(Arc::new(img.to_png_bytes()));
        Ok(())
    }

    /// Key of the final render for the current stack and settings.
    pub fn render_key(&self, bundle: &ModelBundle, cfg: &AdaptationConfig) -> String {
        let stack = self.stack.as_ref().expect("stack present");
        let mut cfg = cfg.clone();
        cfg.seed = self.seed;
        let settings = serde_json::to_string(&cfg).expect("config serializes");
        hex_digest(format!("{}|{}", stack.digest(&bundle.catalog), settings).as_bytes())
    }

    pub fn to_manifest_json(&self) -> Vec<u8> {
        let m = Manifest {
            id: self.id.clone(),
            seed: self.seed,
            state: self.state,
            error: self.error.clone(),
            inversion_psnr: self.inversion_psnr,
            ops: self.stack.as_ref().map(|s| s.ops().to_vec()).unwrap_or_default(),
            next_id: self.stack.as_ref().map_or(1, |s| s.next_id()),
            pending_history: self.pending_history.clone(),
            final_render: self.final_render.clone(),
        };
        serde_json::to_vec_pretty(&m).expect("manifest serializes")
    }

    /// Writes the manifest and any artifacts not yet on disk. Failures are
    /// logged; the in-memory session stays authoritative.
    pub fn persist(&self) {
        let Some(dir) = &self.dir else { return };
        if let Err(e) = self.try_persist(dir) {
            log::warn!("session {}: cannot persist to {}: {e}", self.id, dir.display());
        }
    }

    fn try_persist(&self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir)?;
        let image = dir.join("image.png");
        if !image.exists() {
            fs::write(&image, &*self.image_png)?;
        }
        if let Some(z) = &self.z {
            let p = dir.join("z.arc");
            if !p.exists() {
                z.to_archive().save(&p)?;
            }
        }
        if let Some(gw) = &self.preview_gen {
            let p = dir.join("preview.gen.arc");
            if !p.exists() {
                gw.generator.save_checkpoint(&p)?;
            }
        }
        if let Some(f) = &self.final_render {
            fs::write(dir.join("final.png"), &*f.png)?;
        }
        let tmp = dir.join("manifest.json.tmp");
        fs::write(&tmp, self.to_manifest_json())?;
        fs::rename(tmp, dir.join("manifest.json"))?;
        Ok(())
    }

    /// Loads a persisted session. Sessions interrupted before setup finished
    /// come back in `inverting` and need their setup job restarted; an
    /// interrupted render comes back `ready`.
    pub fn restore(dir: &Path, bundle: &ModelBundle, styles: &StyleGallery) -> anyhow::Result<Self> {
        let m: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let bytes = fs::read(dir.join("image.png"))?;
        let image = Image::from_png_bytes(&bytes)?;
        let mut s = Session::new(m.id, bytes, image, m.seed, m.pending_history, Some(dir.to_path_buf()));
        s.inversion_psnr = m.inversion_psnr;
        s.error = m.error;
        let set_up = matches!(m.state, SessionState::Ready | SessionState::Adapting | SessionState::Done);
        if m.state == SessionState::Error {
            s.state = SessionState::Error;
        } else if set_up {
            let z = LatentCode::from_archive(&Archive::load(dir.join("z.arc"))?)?;
            let gw = LayeredGenerator::load_checkpoint(dir.join("preview.gen.arc"))?;
            s.stack = Some(EditStack::restore(z.clone(), m.ops, m.next_id, &bundle.catalog, styles)?);
            s.z = Some(z);
            let steps = gw.extra.get("preview_steps").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
            s.preview_gen = Some(Arc::new(WeightAdaptedGenerator { generator: gw, steps, loss_trace: Vec::new() }));
            s.render_preview(bundle, styles).map_err(|e| anyhow::anyhow!(e.message))?;
            s.state = SessionState::Ready;
            if let (SessionState::Done, Some(mut f)) = (m.state, m.final_render) {
                f.png = Arc::new(fs::read(dir.join("final.png"))?);
                s.final_render = Some(f);
                s.state = SessionState::Done;
            }
        }
        Ok(s)
    }
}

pub fn state_name(s: SessionState) -> &'static str {
    match s {
        SessionState::Inverting => "inverting",
        SessionState::PreviewFitting => "preview_fitting",
        SessionState::Ready => "ready",
        SessionState::Adapting => "adapting",
        SessionState::Done => "done",
        SessionState::Error => "error",
    }
}

type Shared = Arc<tokio::sync::Mutex<Session>>;

/// Inversion, preview fit and history replay. Runs on a blocking thread and
/// takes the session lock only between stages.
pub fn run_setup(
    session: Shared,
    bundle: Arc<ModelBundle>,
    styles: StyleGallery,
    refine: RefineConfig,
    adapt: AdaptationConfig,
    job: JobHandle,
) {
    let image = {
        let mut s = session.blocking_lock();
        s.state = SessionState::Inverting;
        s.job = Some(job.clone());
        s.persist();
        s.image.clone()
    };
    let cancelled = || job.cancel.load(Ordering::Relaxed);
    let inv = match bundle.invert(&image, &refine) {
        Ok(r) => r,
        Err(e) => return session.blocking_lock().fail(format!("inversion failed: {e}")),
    };
    if cancelled() {
        return;
    }
    {
        let mut s = session.blocking_lock();
        s.inversion_psnr = Some(inv.psnr);
        s.z = Some(inv.z.clone());
        s.state = SessionState::PreviewFitting;
        s.persist();
    }
    let mut gw = match fit_preview_generator(&bundle.generator, &inv.z, &image, &adapt, Some(&job.cancel)) {
        Ok(g) => g,
        Err(AdaptError::Cancelled { .. }) => return,
        Err(e) => return session.blocking_lock().fail(format!("preview fit failed: {e}")),
    };
    gw.generator.extra["preview_steps"] = gw.steps.into();
    let mut s = session.blocking_lock();
    if cancelled() {
        return;
    }
    let history = std::mem::take(&mut s.pending_history);
    match EditStack::from_history(inv.z, history, &bundle.catalog, &styles) {
        Ok(stack) => s.stack = Some(stack),
        Err(e) => return s.fail(format!("history replay failed: {e}")),
    }
    s.preview_gen = Some(Arc::new(gw));
    if let Err(e) = s.render_preview(&bundle, &styles) {
        return s.fail(e.message);
    }
    s.state = SessionState::Ready;
    s.job = None;
    s.persist();
}

/// Inputs of a final render captured under the session lock.
pub struct RenderInput {
    pub key: String,
    pub z_e: LatentCode,
    pub image: Image,
    pub mask: ndarray::Array2<f32>,
    pub cfg: AdaptationConfig,
}

impl Session {
    /// Either serves the cached render (returns `None` and moves to `done`)
    /// or moves to `adapting` and returns what the job needs.
    pub fn begin_render(
        &mut self,
        bundle: &ModelBundle,
        styles: &StyleGallery,
        cfg: &AdaptationConfig,
        job: JobHandle,
    ) -> Result<Option<RenderInput>, ApiError> {
        self.require_idle()?;
        let key = self.render_key(bundle, cfg);
        if self.final_render.as_ref().is_some_and(|f| f.key == key) {
            self.state = SessionState::Done;
            self.persist();
            return Ok(None);
        }
        let stack = self.stack.as_mut().expect("stack present");
        let z_e = stack.replay(&bundle.catalog, styles).map_err(ApiError::invalid)?;
        let (h, w) = self.image.dims();
        let mut cfg = cfg.clone();
        cfg.seed = self.seed;
        let mask = edit_pixel_mask(stack.ops(), h, w, cfg.mask_dilation);
        self.state = SessionState::Adapting;
        self.error = None;
        self.job = Some(job);
        self.persist();
        Ok(Some(RenderInput { key, z_e, image: self.image.clone(), mask, cfg }))
    }
}

/// Fits `G′` and renders the edited code. A cancelled job leaves the
/// previous final render untouched and returns the session to `ready`.
pub fn run_render(session: Shared, bundle: Arc<ModelBundle>, input: RenderInput, job: JobHandle) {
    let progress = job.progress.clone();
    let result = optimize_adaptation(&bundle.generator, &input.z_e, &input.image, &input.mask, &input.cfg, Some(&job.cancel), |step, best| {
        let mut p = progress.lock().unwrap();
        p.step = step;
        p.best_loss = best;
    })
    .and_then(|(adapted, report)| Ok((adapted.render(&input.z_e)?, report)));
    let mut s = session.blocking_lock();
    if s.job.as_ref().map(|j| j.id) != Some(job.id) {
        return;
    }
    s.job = None;
    s.state = SessionState::Ready;
    match result {
        _ if job.cancel.load(Ordering::Relaxed) => log::info!("session {}: render cancelled", s.id),
        Ok((img, report)) => {
            let outside_psnr = psnr(&img, &input.image, Some(&input.mask));
            s.final_render = Some(FinalRender {
                key: input.key,
                png: Arc::new(img.to_png_bytes()),
                loss_trace: report.best_trace,
                outside_psnr,
            });
            s.state = SessionState::Done;
        }
        Err(AdaptError::Cancelled { .. }) => {}
        Err(e) => s.error = Some(format!("render failed: {e}")),
    }
    s.persist();
}
