//! Image-specific generator adaptation.
//!
//! `G′` keeps every pretrained weight and multiplies (or offsets) the output
//! of each fine layer except the last by a learned field δ. The fields are
//! fitted so that `G′(z_e)` matches the photo outside the edited footprint:
//! `L = mean|G′(z_e) − x| over unmasked entries + λ_reg Σ‖δ‖²`.
//!
//! `G′_w` is the cheap preview counterpart: a copy of the fine-layer weights
//! fitted once to the unedited image and reused for every edit.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::archive::{Archive, ArchiveError};
use crate::editing::EditOp;
use crate::generator::{grad_slices, BackwardRequest, GeneratorError, LatentCode, LayeredGenerator, Perturb, PerturbMode};
use crate::image::Image;
use crate::nn::Adam;
use crate::tensor::{cst, sign, Real};

pub const PERTURBATION_KIND: &str = "perturbation";

#[derive(Debug, thiserror::Error)]
pub enum AdaptError {
    #[error("loss became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("cancelled after {step} steps")]
    Cancelled { step: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("perturbations were fitted for checkpoint {expected}, not {found}")]
    Checkpoint { expected: String, found: String },
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub lambda_reg: f64,
    pub lr: f64,
    pub steps: usize,
    pub preview_steps: usize,
    pub preview_lr: f64,
    pub seed: u64,
    pub mode: PerturbMode,
    /// Std of a random δ initialization; `None` starts from δ = 0.
    pub random_init: Option<f32>,
    /// Dilation of the edited-cell footprint in pixels.
    pub mask_dilation: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 1e-5,
            lr: 0.1,
            steps: 1000,
            preview_steps: 200,
            preview_lr: 1e-3,
            seed: 0,
            mode: PerturbMode::Multiplicative,
            random_init: None,
            mask_dilation: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSet {
    pub deltas: Vec<Array3<f32>>,
    pub mode: PerturbMode,
    pub seed: u64,
}

impl PerturbationSet {
    pub fn zeros(g: &LayeredGenerator, mode: PerturbMode) -> Self {
        Self { deltas: g.zero_deltas(), mode, seed: 0 }
    }

    pub fn random(g: &LayeredGenerator, mode: PerturbMode, std: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, std).expect("valid std");
        let deltas = g.zero_deltas().into_iter().map(|d| d.mapv(|_| normal.sample(&mut rng))).collect();
        Self { deltas, mode, seed }
    }

    pub fn as_perturb(&self) -> Perturb<'_, f32> {
        Perturb { mode: self.mode, deltas: &self.deltas }
    }

    pub fn reg_loss(&self) -> f64 {
        reg_loss(&self.deltas)
    }
}

/// Mean absolute difference over entries whose pixel is outside `mask`
/// (mask = 1 marks the edited region). Zero when everything is masked.
pub fn match_loss(out: &Image, x: &Image, mask: &Array2<f32>) -> Result<f64, AdaptError> {
    if out.pixels.dim() != x.pixels.dim() || mask.dim() != x.dims() {
        return Err(AdaptError::Shape(format!(
            "output {:?}, target {:?}, mask {:?}",
            out.pixels.dim(),
            x.pixels.dim(),
            mask.dim()
        )));
    }
    let keep = mask.mapv(|m| 1.0 - m);
    Ok(match_terms(&out.pixels, &x.pixels, &keep, false).0)
}

fn match_terms<T: Real>(y: &Array3<T>, x: &Array3<T>, keep: &Array2<T>, want_grad: bool) -> (f64, Option<Array3<T>>) {
    let channels = y.dim().0;
    let count = keep.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() * channels as f64;
    if count == 0.0 {
        return (0.0, want_grad.then(|| Array3::zeros(y.dim())));
    }
    let mut sum = 0.0;
    for (a, b) in y.axis_iter(Axis(0)).zip(x.axis_iter(Axis(0))) {
        ndarray::Zip::from(&a).and(&b).and(keep).for_each(|&a, &b, &k| sum += ((a - b).abs() * k).to_f64().unwrap());
    }
    let grad = want_grad.then(|| {
        let inv = cst::<T>(1.0 / count);
        let mut g = Array3::zeros(y.dim());
        for c in 0..channels {
            ndarray::Zip::from(g.index_axis_mut(Axis(0), c))
                .and(y.index_axis(Axis(0), c))
                .and(x.index_axis(Axis(0), c))
                .and(keep)
                .for_each(|g, &a, &b, &k| *g = sign(a - b) * k * inv);
        }
        g
    });
    (sum / count, grad)
}

/// `Σ_i ‖δ_i‖²`.
pub fn reg_loss<T: Real>(deltas: &[Array3<T>]) -> f64 {
    deltas.iter().flat_map(|d| d.iter()).map(|v| v.to_f64().unwrap().powi(2)).sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub total: f64,
    pub matching: f64,
    pub reg: f64,
}

/// Total adaptation loss at `deltas`, with its δ gradient when requested.
/// `z_h` is the code at the split boundary; `keep` is `1 − mask`.
pub fn adaptation_loss<T: Real>(
    g: &LayeredGenerator<T>,
    z_h: &Array3<T>,
    target: &Array3<T>,
    keep: &Array2<T>,
    deltas: &[Array3<T>],
    mode: PerturbMode,
    lambda_reg: f64,
    want_grad: bool,
) -> Result<(LossTerms, Option<Vec<Array3<T>>>), GeneratorError> {
    let perturb = Perturb { mode, deltas };
    let split = g.split();
    let reg = reg_loss(deltas);
    if !want_grad {
        let y = g.forward_range(z_h, split, g.n_layers(), Some(&perturb))?;
        let (m, _) = match_terms(&y, target, keep, false);
        return Ok((LossTerms { total: m + lambda_reg * reg, matching: m, reg }, None));
    }
    let tr = g.forward_traced(z_h, split, g.n_layers(), Some(&perturb))?;
    let (m, dy) = match_terms(&tr.output, target, keep, true);
    let req = BackwardRequest { input: false, weights_from: None, deltas: true };
    let mut grads = g.backward(&tr, &dy.unwrap(), Some(&perturb), &req).deltas.expect("delta gradients requested");
    let k = cst::<T>(2.0 * lambda_reg);
    for (gd, d) in grads.iter_mut().zip(deltas) {
        gd.scaled_add(k, d);
    }
    Ok((LossTerms { total: m + lambda_reg * reg, matching: m, reg }, Some(grads)))
}

/// Pixel mask covering the latent cells touched by `ops`.
pub fn edit_pixel_mask(ops: &[EditOp], height: usize, width: usize, dilation: usize) -> Array2<f32> {
    ops.iter()
        .map(|o| o.region.clone())
        .reduce(|a, b| a.union(&b))
        .map_or_else(|| Array2::zeros((height, width)), |r| r.footprint(height, width, dilation))
}

fn binding_digest(z_e: &LatentCode, mask: &Array2<f32>, x: &Image) -> String {
    let mut h = Sha256::new();
    for v in z_e.values.iter().chain(mask.iter()).chain(x.pixels.iter()) {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// `G′`: frozen base generator plus fitted perturbations.
#[derive(Clone, Debug)]
pub struct AdaptedGenerator {
    pub base: Arc<LayeredGenerator>,
    pub perturbations: PerturbationSet,
    pub binding: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AdaptationReport {
    /// Best-so-far total loss before the first step and after every step.
    pub best_trace: Vec<f64>,
    pub raw_trace: Vec<LossTerms>,
}

impl AdaptationReport {
    pub fn best(&self) -> f64 {
        self.best_trace.last().copied().unwrap_or(f64::NAN)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), AdaptError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "total", "match", "reg", "best"])?;
        for (i, (t, b)) in self.raw_trace.iter().zip(&self.best_trace).enumerate() {
            out.write_record([i.to_string(), t.total.to_string(), t.matching.to_string(), t.reg.to_string(), b.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Fits perturbations with Adam at a constant learning rate and keeps the
/// best δ seen. `cancel` is polled between steps; `progress` receives
/// `(step, best_loss)`.
pub fn optimize_adaptation(
    g: &Arc<LayeredGenerator>,
    z_e: &LatentCode,
    x: &Image,
    pixel_mask: &Array2<f32>,
    cfg: &AdaptationConfig,
    cancel: Option<&AtomicBool>,
    mut progress: impl FnMut(usize, f64),
) -> Result<(AdaptedGenerator, AdaptationReport), AdaptError> {
    if pixel_mask.dim() != x.dims() {
        return Err(AdaptError::Shape(format!("mask {:?} vs image {:?}", pixel_mask.dim(), x.dims())));
    }
    let out_shape = g.output_shape();
    if [3, x.height(), x.width()] != out_shape {
        return Err(AdaptError::Shape(format!("image {:?} vs generator output {:?}", x.dims(), out_shape)));
    }
    let z_h = g.forward_to(z_e, g.split())?.values;
    let keep = pixel_mask.mapv(|m| 1.0 - m);
    let mut set = match cfg.random_init {
        Some(std) => PerturbationSet::random(g, cfg.mode, std, cfg.seed),
        None => PerturbationSet::zeros(g, cfg.mode),
    };
    let mut best = set.clone();
    let mut report = AdaptationReport::default();
    let mut best_loss = f64::INFINITY;
    let mut opt = Adam::new(cfg.lr);
    for step in 0..=cfg.steps {
        if step > 0 && cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
            return Err(AdaptError::Cancelled { step });
        }
        let want = step < cfg.steps;
        let (terms, grads) = adaptation_loss(g, &z_h, &x.pixels, &keep, &set.deltas, cfg.mode, cfg.lambda_reg, want)?;
        if !terms.total.is_finite() {
            return Err(AdaptError::NonFinite { step });
        }
        if terms.total < best_loss {
            best_loss = terms.total;
            best.deltas.clone_from(&set.deltas);
        }
        report.raw_trace.push(terms);
        report.best_trace.push(best_loss);
        progress(step, best_loss);
        let Some(grads) = grads else { break };
        let gs: Vec<&[f32]> = grads.iter().map(|d| d.as_slice().unwrap()).collect();
        let mut ps: Vec<&mut [f32]> = set.deltas.iter_mut().map(|d| d.as_slice_mut().unwrap()).collect();
        opt.step(&mut ps, &gs);
    }
    let binding = binding_digest(z_e, pixel_mask, x);
    Ok((AdaptedGenerator { base: g.clone(), perturbations: best, binding }, report))
}

impl AdaptedGenerator {
    pub fn render(&self, z_e: &LatentCode) -> Result<Image, AdaptError> {
        let z_h = self.base.forward_to(z_e, self.base.split())?;
        let p = self.perturbations.as_perturb();
        let out = self.base.forward_range(&z_h.values, z_h.boundary, self.base.n_layers(), Some(&p))?;
        Ok(Image { pixels: out, segmentation: None })
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(
            PERTURBATION_KIND,
            json!({
                "checkpoint_id": self.base.weights_digest(),
                "binding": self.binding,
                "mode": self.perturbations.mode,
                "seed": self.perturbations.seed,
            }),
        );
        for (j, d) in self.perturbations.deltas.iter().enumerate() {
            a.insert3(format!("delta.{j}"), d);
        }
        a
    }

    pub fn from_archive(a: &Archive, base: Arc<LayeredGenerator>) -> Result<Self, AdaptError> {
        a.expect_kind(PERTURBATION_KIND)?;
        let bad = |k: &str| ArchiveError::Manifest(format!("missing or invalid `{k}`"));
        let ckpt = a.meta["checkpoint_id"].as_str().ok_or_else(|| bad("checkpoint_id"))?;
        let found = base.weights_digest();
        if ckpt != found {
            return Err(AdaptError::Checkpoint { expected: ckpt.to_string(), found });
        }
        let mode: PerturbMode = serde_json::from_value(a.meta["mode"].clone()).map_err(|_| bad("mode"))?;
        let seed = a.meta["seed"].as_u64().ok_or_else(|| bad("seed"))?;
        let mut deltas = base.zero_deltas();
        for (j, d) in deltas.iter_mut().enumerate() {
            let arr = a.get(&format!("delta.{j}"))?.to_array3()?;
            if arr.dim() != d.dim() {
                return Err(AdaptError::Shape(format!("delta.{j} is {:?}, expected {:?}", arr.dim(), d.dim())));
            }
            *d = arr;
        }
        let binding = a.meta["binding"].as_str().ok_or_else(|| bad("binding"))?.to_string();
        Ok(Self { base, perturbations: PerturbationSet { deltas, mode, seed }, binding })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AdaptError> {
        Ok(self.to_archive().save(path)?)
    }
}

/// `G′_w`: fine-layer weights fitted to the unedited image.
#[derive(Clone, Debug)]
pub struct WeightAdaptedGenerator {
    pub generator: LayeredGenerator,
    pub steps: usize,
    pub loss_trace: Vec<f64>,
}

impl WeightAdaptedGenerator {
    pub fn render(&self, z_e: &LatentCode) -> Result<Image, AdaptError> {
        Ok(self.generator.forward(z_e)?)
    }
}

/// Fine-tunes a copy of the fine layers on mean absolute pixel error over
/// the whole image, keeping the best weights seen.
pub fn fit_preview_generator(
    g: &LayeredGenerator,
    z: &LatentCode,
    x: &Image,
    cfg: &AdaptationConfig,
    cancel: Option<&AtomicBool>,
) -> Result<WeightAdaptedGenerator, AdaptError> {
    let mut gw = g.clone();
    let z_h = g.forward_to(z, g.split())?.values;
    let keep = Array2::<f32>::ones(x.dims());
    let first = g.split() + 1;
    let mut opt = Adam::new(cfg.preview_lr);
    let mut best = gw.clone();
    let mut best_loss = f64::INFINITY;
    let mut trace = Vec::with_capacity(cfg.preview_steps + 1);
    let req = BackwardRequest { input: false, weights_from: Some(first), deltas: false };
    for step in 0..=cfg.preview_steps {
        if step > 0 && cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
            return Err(AdaptError::Cancelled { step });
        }
        let tr = gw.forward_traced(&z_h, gw.split(), gw.n_layers(), None)?;
        let (l, dy) = match_terms(&tr.output, &x.pixels, &keep, true);
        if !l.is_finite() {
            return Err(AdaptError::NonFinite { step });
        }
        if l < best_loss {
            best_loss = l;
            best = gw.clone();
        }
        trace.push(best_loss);
        if step == cfg.preview_steps {
            break;
        }
        let grads = gw.backward(&tr, &dy.unwrap(), None, &req).weights.expect("weight gradients requested");
        let gs = grad_slices(&grads, first);
        opt.step(&mut gw.params_mut(first), &gs);
    }
    Ok(WeightAdaptedGenerator { generator: best, steps: cfg.preview_steps, loss_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::LayerSpec;
    use crate::nn::Activation;
    use ndarray::array;
    use rand::Rng;

    fn micro() -> LayeredGenerator<f64> {
        let specs = vec![
            LayerSpec::conv(3, 4, 1, 1, Activation::LeakyRelu),
            LayerSpec::conv(4, 4, 3, 2, Activation::LeakyRelu),
            LayerSpec::conv(4, 3, 3, 1, Activation::Tanh),
        ];
        LayeredGenerator::random(specs, 1, [3, 2, 2], 11).unwrap()
    }

    fn img(p: Array3<f32>) -> Image {
        Image { pixels: p, segmentation: None }
    }

    #[test]
    fn match_loss_examples() {
        let out = img(Array3::from_shape_fn((3, 1, 2), |(_, _, x)| [0.2, 0.8][x]));
        let x = img(Array3::from_shape_fn((3, 1, 2), |(_, _, x)| [0.0, 0.8][x]));
        let l = match_loss(&out, &x, &array![[0.0, 1.0]]).unwrap();
        assert!((l - 0.2).abs() < 1e-7);
        assert_eq!(match_loss(&out, &x, &array![[1.0, 1.0]]).unwrap(), 0.0);
        assert_eq!(match_loss(&x, &x, &array![[0.0, 0.0]]).unwrap(), 0.0);
        assert!(match_loss(&out, &x, &array![[0.0]]).is_err());
    }

    #[test]
    fn reg_loss_examples() {
        assert_eq!(reg_loss::<f32>(&[Array3::zeros((1, 2, 2))]), 0.0);
        let d = array![[[1.0f32, -2.0]]];
        assert_eq!(reg_loss(std::slice::from_ref(&d)), 5.0);
        assert_eq!(reg_loss(&[d.mapv(|v| 2.0 * v)]), 20.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = micro();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Array3::from_shape_fn((3, 2, 2), |_| rng.random_range(-1.0..1.0));
        let z_h = g.forward_range(&z, 0, 1, None).unwrap();
        let target = Array3::from_shape_fn((3, 4, 4), |_| rng.random_range(-0.9..0.9));
        let keep = Array2::from_shape_fn((4, 4), |(y, x)| if y < 2 && x < 2 { 0.0 } else { 1.0 });
        for mode in [PerturbMode::Multiplicative, PerturbMode::Additive] {
            let deltas: Vec<_> = g.zero_deltas().into_iter().map(|d| d.mapv(|_| rng.random_range(-0.3..0.3))).collect();
            let (_, grads) = adaptation_loss(&g, &z_h, &target, &keep, &deltas, mode, 0.1, true).unwrap();
            let grads = grads.unwrap();
            let h = 1e-6;
            for _ in 0..8 {
                let (c, y, x) = deltas[0].dim();
                let idx = [rng.random_range(0..c), rng.random_range(0..y), rng.random_range(0..x)];
                let mut dp = deltas.clone();
                dp[0][idx] += h;
                let mut dm = deltas.clone();
                dm[0][idx] -= h;
                let f = |d: &[Array3<f64>]| adaptation_loss(&g, &z_h, &target, &keep, d, mode, 0.1, false).unwrap().0.total;
                let fd = (f(&dp) - f(&dm)) / (2.0 * h);
                let an = grads[0][idx];
                assert!((fd - an).abs() <= 1e-3 * fd.abs().max(1e-6), "{mode:?} {idx:?}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn match_loss_ignores_masked_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = img(Array3::from_shape_fn((3, 4, 4), |_| rng.random_range(-1.0..1.0)));
        let y = img(Array3::from_shape_fn((3, 4, 4), |_| rng.random_range(-1.0..1.0)));
        let mask = Array2::from_shape_fn((4, 4), |(r, _)| f32::from(u8::from(r == 1)));
        let mut y2 = y.clone();
        y2.pixels.slice_mut(ndarray::s![.., 1, ..]).fill(123.0);
        assert_eq!(match_loss(&y, &x, &mask).unwrap(), match_loss(&y2, &x, &mask).unwrap());
    }

    #[test]
    fn zero_steps_is_identity_and_base_frozen() {
        let g = Arc::new(micro().cast::<f32>());
        let digest = g.weights_digest();
        let z = LatentCode::new(Array3::from_elem((3, 2, 2), 0.3), 0);
        let x = g.forward(&z).unwrap();
        let mask = Array2::zeros((4, 4));
        let cfg = AdaptationConfig { steps: 0, ..Default::default() };
        let (a, rep) = optimize_adaptation(&g, &z, &x, &mask, &cfg, None, |_, _| {}).unwrap();
        assert_eq!(rep.best_trace.len(), 1);
        assert!(a.render(&z).unwrap().max_abs_diff(&x) <= 1e-6);
        let noisy = img(x.pixels.mapv(|v| (v * 0.7 + 0.1).clamp(-1.0, 1.0)));
        let cfg = AdaptationConfig { steps: 30, lambda_reg: 1e-4, ..Default::default() };
        let (a, rep) = optimize_adaptation(&g, &z, &noisy, &mask, &cfg, None, |_, _| {}).unwrap();
        assert_eq!(g.weights_digest(), digest);
        assert!(rep.best() < rep.best_trace[0]);
        assert!(rep.best_trace.windows(2).all(|w| w[1] <= w[0]));
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 32);
        let back = AdaptedGenerator::from_archive(&Archive::from_bytes(&a.to_archive().to_bytes()).unwrap(), g.clone()).unwrap();
        assert_eq!(back.perturbations, a.perturbations);
    }

    #[test]
    fn cancellation_between_steps() {
        let g = Arc::new(micro().cast::<f32>());
        let z = LatentCode::new(Array3::from_elem((3, 2, 2), 0.3), 0);
        let x = g.forward(&z).unwrap();
        let flag = AtomicBool::new(false);
        let r = optimize_adaptation(&g, &z, &x, &Array2::zeros((4, 4)), &AdaptationConfig::default(), Some(&flag), |s, _| {
            if s == 3 {
                flag.store(true, Ordering::Relaxed);
            }
        });
        assert!(matches!(r, Err(AdaptError::Cancelled { step: 4 })));
    }

    #[test]
    fn preview_fit_improves_and_zero_steps_is_base() {
        let g = micro().cast::<f32>();
        let z = LatentCode::new(Array3::from_elem((3, 2, 2), 0.3), 0);
        let x = img(g.forward(&z).unwrap().pixels.mapv(|v| (0.5 * v + 0.2).clamp(-1.0, 1.0)));
        let zero = fit_preview_generator(&g, &z, &x, &AdaptationConfig { preview_steps: 0, ..Default::default() }, None).unwrap();
        assert_eq!(zero.generator, g);
        let cfg = AdaptationConfig { preview_steps: 50, preview_lr: 1e-2, ..Default::default() };
        let fit = fit_preview_generator(&g, &z, &x, &cfg, None).unwrap();
        let before = crate::image::psnr(&g.forward(&z).unwrap(), &x, None);
        let after = crate::image::psnr(&fit.render(&z).unwrap(), &x, None);
        assert!(after > before, "{after} <= {before}");
        assert_eq!(fit.generator.layers[0], g.layers[0]);
    }
}
