//! Latent recovery: a feed-forward encoder followed by gradient refinement.
//!
//! The encoder gives a starting code; [`refine_latent`] then minimizes the
//! reconstruction loss with Adam. When the code being edited sits above the
//! network input, the optimization variables can be placed at an earlier
//! boundary and the returned code is their push-forward, which keeps the
//! recovered code on the generator's range.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{Archive, ArchiveError};
use crate::generator::{BackwardRequest, GeneratorError, LatentCode, LayeredGenerator};
use crate::image::{psnr, Image};
use crate::nn::{avg_pool2, avg_pool2_backward, cosine_lr, im2col, Activation, Adam, Conv2d, ConvGrads};
use crate::perceptual::ReconstructionLoss;
use crate::tensor::{pearson, Real};

pub const ENCODER_KIND: &str = "encoder";

#[derive(Debug, thiserror::Error)]
pub enum InversionError {
    #[error("loss became non-finite at step {step} (last finite loss {last_loss:.6})")]
    NonFinite { step: usize, last_loss: f64 },
    #[error("training diverged at epoch {epoch}; loss trace {trace:?}")]
    Diverged { epoch: usize, trace: Vec<f64> },
    #[error("image is {found:?}, encoder expects {expected:?}")]
    ImageDims { expected: (usize, usize), found: (usize, usize) },
    #[error("variables at boundary {variables} cannot produce a code at boundary {target}")]
    Boundary { variables: usize, target: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    /// Output width of each downsampling stage.
    pub widths: Vec<usize>,
    /// Residual blocks per stage (the first one downsamples).
    pub blocks_per_stage: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { stem_channels: 16, widths: vec![32, 64, 128, 128], blocks_per_stage: 1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ResBlock<T> {
    downsample: bool,
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    skip: Option<Conv2d<T>>,
}

/// Residual convolutional encoder mapping an image to a latent grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T = f32> {
    stem: Conv2d<T>,
    blocks: Vec<ResBlock<T>>,
    head: Conv2d<T>,
    pub config: EncoderConfig,
    pub image_size: usize,
    pub latent_shape: [usize; 3],
}

struct BlockTrace<T> {
    pooled_dims: (usize, usize, usize),
    cols1: ndarray::Array2<T>,
    pre1: Array3<T>,
    out1: Array3<T>,
    cols2: ndarray::Array2<T>,
    skip_cols: Option<ndarray::Array2<T>>,
    pre_sum: Array3<T>,
    out: Array3<T>,
}

struct EncoderTrace<T> {
    stem_cols: ndarray::Array2<T>,
    stem_pre: Array3<T>,
    stem_out: Array3<T>,
    blocks: Vec<BlockTrace<T>>,
    head_cols: ndarray::Array2<T>,
    output: Array3<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(image_size: usize, latent_shape: [usize; 3], config: EncoderConfig) -> Result<Self, InversionError> {
        let stages = config.widths.len();
        if image_size >> stages != latent_shape[1] || latent_shape[1] != latent_shape[2] {
            return Err(InversionError::ImageDims {
                expected: (latent_shape[1] << stages, latent_shape[2] << stages),
                found: (image_size, image_size),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let g = 2.0f64.sqrt();
        let stem = Conv2d::init(3, config.stem_channels, 3, g, &mut rng);
        let mut blocks = Vec::new();
        let mut c = config.stem_channels;
        for &w in &config.widths {
            for b in 0..config.blocks_per_stage.max(1) {
                let downsample = b == 0;
                let skip = (c != w).then(|| Conv2d::init(c, w, 1, 1.0, &mut rng));
                blocks.push(ResBlock {
                    downsample,
                    conv1: Conv2d::init(c, w, 3, g, &mut rng),
                    // second conv starts small so each block begins near its skip path
                    conv2: Conv2d::init(w, w, 3, 0.5, &mut rng),
                    skip,
                });
                c = w;
            }
        }
        let head = Conv2d::init(c, latent_shape[0], 1, 1.0, &mut rng);
        Ok(Self { stem, blocks, head, config, image_size, latent_shape })
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut v = vec![&mut self.stem];
        for b in &mut self.blocks {
            v.push(&mut b.conv1);
            v.push(&mut b.conv2);
            if let Some(s) = b.skip.as_mut() {
                v.push(s);
            }
        }
        v.push(&mut self.head);
        v
    }

    fn convs(&self) -> Vec<&Conv2d<T>> {
        let mut v = vec![&self.stem];
        for b in &self.blocks {
            v.push(&b.conv1);
            v.push(&b.conv2);
            if let Some(s) = b.skip.as_ref() {
                v.push(s);
            }
        }
        v.push(&self.head);
        v
    }

    pub fn forward(&self, x: &Array3<T>) -> Array3<T> {
        self.forward_traced(x).output
    }

    fn forward_traced(&self, x: &Array3<T>) -> EncoderTrace<T> {
        let act = Activation::LeakyRelu;
        let (_, h, w) = x.dim();
        let stem_cols = im2col(x, 3);
        let stem_pre = self.stem.forward_cols(&stem_cols, h, w);
        let stem_out = act.apply(&stem_pre);
        let mut cur = stem_out.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let p = if b.downsample { avg_pool2(&cur) } else { cur.clone() };
            let (_, ph, pw) = p.dim();
            let cols1 = im2col(&p, 3);
            let pre1 = b.conv1.forward_cols(&cols1, ph, pw);
            let out1 = act.apply(&pre1);
            let cols2 = im2col(&out1, 3);
            let mut pre_sum = b.conv2.forward_cols(&cols2, ph, pw);
            let skip_cols = match &b.skip {
                Some(s) => {
                    let sc = im2col(&p, 1);
                    pre_sum += &s.forward_cols(&sc, ph, pw);
                    Some(sc)
                }
                None => {
                    pre_sum += &p;
                    None
                }
            };
            let out = act.apply(&pre_sum);
            cur = out.clone();
            blocks.push(BlockTrace { pooled_dims: p.dim(), cols1, pre1, out1, cols2, skip_cols, pre_sum, out });
        }
        let (_, hh, hw) = cur.dim();
        let head_cols = im2col(&cur, 1);
        let output = self.head.forward_cols(&head_cols, hh, hw);
        EncoderTrace { stem_cols, stem_pre, stem_out, blocks, head_cols, output }
    }

    /// Parameter gradients (in `convs` order) for an output gradient.
    fn backward(&self, tr: &EncoderTrace<T>, dout: &Array3<T>) -> Vec<ConvGrads<T>> {
        let act = Activation::LeakyRelu;
        let mut grads: Vec<ConvGrads<T>> = self.convs().into_iter().map(ConvGrads::zeros_like).collect();
        let n = grads.len();
        let mut g = self.head.backward(&tr.head_cols, dout, Some(&mut grads[n - 1]), true).unwrap();
        // index of each block's first conv in `convs` order
        let mut offsets = Vec::with_capacity(self.blocks.len());
        let mut idx = 1;
        for b in &self.blocks {
            offsets.push(idx);
            idx += 2 + usize::from(b.skip.is_some());
        }
        for ((b, bt), &off) in self.blocks.iter().zip(&tr.blocks).zip(&offsets).rev() {
            act.backward(&bt.pre_sum, &bt.out, &mut g);
            let mut da = b.conv2.backward(&bt.cols2, &g, Some(&mut grads[off + 1]), true).unwrap();
            act.backward(&bt.pre1, &bt.out1, &mut da);
            let mut dp = b.conv1.backward(&bt.cols1, &da, Some(&mut grads[off]), true).unwrap();
            match (&b.skip, &bt.skip_cols) {
                (Some(s), Some(sc)) => dp += &s.backward(sc, &g, Some(&mut grads[off + 2]), true).unwrap(),
                _ => dp += &g,
            }
            debug_assert_eq!(dp.dim(), bt.pooled_dims);
            g = if b.downsample { avg_pool2_backward(&dp) } else { dp };
        }
        act.backward(&tr.stem_pre, &tr.stem_out, &mut g);
        self.stem.backward(&tr.stem_cols, &g, Some(&mut grads[0]), false);
        grads
    }
}

impl Encoder<f32> {
    pub fn encode(&self, img: &Image) -> Result<LatentCode, InversionError> {
        if img.dims() != (self.image_size, self.image_size) {
            return Err(InversionError::ImageDims { expected: (self.image_size, self.image_size), found: img.dims() });
        }
        Ok(LatentCode::new(self.forward(&img.pixels), 0))
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(
            ENCODER_KIND,
            json!({ "config": self.config, "image_size": self.image_size, "latent_shape": self.latent_shape }),
        );
        for (i, c) in self.convs().into_iter().enumerate() {
            a.insert2(format!("convs.{i}.weight"), &c.weight);
            a.insert1(format!("convs.{i}.bias"), &c.bias);
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self, InversionError> {
        a.expect_kind(ENCODER_KIND)?;
        let bad = |k: &str| ArchiveError::Manifest(format!("missing or invalid `{k}`"));
        let config: EncoderConfig = serde_json::from_value(a.meta["config"].clone()).map_err(|_| bad("config"))?;
        let image_size = a.meta["image_size"].as_u64().ok_or_else(|| bad("image_size"))? as usize;
        let latent_shape: [usize; 3] =
            serde_json::from_value(a.meta["latent_shape"].clone()).map_err(|_| bad("latent_shape"))?;
        let mut e = Encoder::new(image_size, latent_shape, config)?;
        for (i, c) in e.convs_mut().into_iter().enumerate() {
            let w = a.get(&format!("convs.{i}.weight"))?.to_array2()?;
            if w.dim() != c.weight.dim() {
                return Err(ArchiveError::Shape(format!("convs.{i}.weight is {:?}, expected {:?}", w.dim(), c.weight.dim())).into());
            }
            c.weight = w;
            let b = a.get(&format!("convs.{i}.bias"))?.to_array1()?;
            if b.len() != c.bias.len() {
                return Err(ArchiveError::Shape(format!("convs.{i}.bias has {} entries", b.len())).into());
            }
            c.bias = b;
        }
        Ok(e)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), InversionError> {
        Ok(self.to_archive().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, InversionError> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// One training example: an image and, for generated samples, its true code.
#[derive(Clone, Debug)]
pub struct EncoderSample {
    pub image: Image,
    pub latent: Option<LatentCode>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the mean squared latent error (generated samples only).
    pub latent_weight: f64,
    /// Weight of the reconstruction loss `L_r(x, G(E(x)))`.
    pub recon_weight: f64,
    pub seed: u64,
    /// Held-out mean loss must fall below this, when set.
    pub max_heldout_loss: Option<f64>,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            latent_weight: 1.0,
            recon_weight: 1.0,
            seed: 0,
            max_heldout_loss: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderReport {
    pub epoch_losses: Vec<f64>,
    pub heldout_loss: f64,
}

fn sample_loss(
    enc: &Encoder,
    g: &LayeredGenerator,
    loss: &ReconstructionLoss,
    s: &EncoderSample,
    cfg: &EncoderTrainConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<ConvGrads<f32>>>), InversionError> {
    let tr = enc.forward_traced(&s.image.pixels);
    let zhat = &tr.output;
    let mut total = 0.0;
    let mut dz = Array3::<f32>::zeros(zhat.dim());
    if let (Some(z), true) = (&s.latent, cfg.latent_weight > 0.0) {
        let n = zhat.len() as f64;
        let k = (2.0 * cfg.latent_weight / n) as f32;
        let mut se = 0.0;
        ndarray::Zip::from(&mut dz).and(zhat).and(&z.values).for_each(|d, &a, &b| {
            se += ((a - b) * (a - b)) as f64;
            *d += k * (a - b);
        });
        total += cfg.latent_weight * se / n;
    }
    if cfg.recon_weight > 0.0 {
        let target = loss.prepare(&s.image.pixels);
        if want_grad {
            let gt = g.forward_traced(zhat, 0, g.n_layers(), None)?;
            let (l, dy) = loss.eval(&target, &gt.output, true);
            total += cfg.recon_weight * l as f64;
            let req = BackwardRequest { input: true, weights_from: None, deltas: false };
            let dzr = g.backward(&gt, &dy.unwrap(), None, &req).input.unwrap();
            dz.scaled_add(cfg.recon_weight as f32, &dzr);
        } else {
            let out = g.forward_range(zhat, 0, g.n_layers(), None)?;
            total += cfg.recon_weight * loss.eval(&target, &out, false).0 as f64;
        }
    }
    let grads = want_grad.then(|| enc.backward(&tr, &dz));
    Ok((total, grads))
}

/// Trains an encoder against a frozen generator.
pub fn train_encoder(
    g: &LayeredGenerator,
    train: &[EncoderSample],
    heldout: &[EncoderSample],
    loss: &ReconstructionLoss,
    enc_config: EncoderConfig,
    cfg: &EncoderTrainConfig,
) -> Result<(Encoder, EncoderReport), InversionError> {
    if train.is_empty() {
        return Err(InversionError::EmptyDataset);
    }
    let image_size = train[0].image.height();
    let mut enc = Encoder::<f32>::new(image_size, g.latent_shape(), enc_config)?;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let bs = cfg.batch_size.max(1);
    let total_batches = cfg.epochs * train.len().div_ceil(bs);
    let mut batch_no = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = 0.0;
        for batch in order.chunks(bs) {
            let mut sum: Option<Vec<ConvGrads<f32>>> = None;
            for &i in batch {
                let (l, gr) = sample_loss(&enc, g, loss, &train[i], cfg, true)?;
                acc += l;
                let gr = gr.unwrap();
                match sum.as_mut() {
                    Some(s) => s.iter_mut().zip(&gr).for_each(|(a, b)| a.add_assign(b)),
                    None => sum = Some(gr),
                }
            }
            let mut sum = sum.unwrap();
            sum.iter_mut().for_each(|gr| gr.scale(1.0 / batch.len() as f32));
            let grads: Vec<&[f32]> = sum
                .iter()
                .flat_map(|gr| [gr.weight.as_slice().unwrap(), gr.bias.as_slice().unwrap()])
                .collect();
            let mut params: Vec<&mut [f32]> = enc
                .convs_mut()
                .into_iter()
                .flat_map(|c| [c.weight.as_slice_mut().unwrap(), c.bias.as_slice_mut().unwrap()])
                .collect();
            let lr = cosine_lr(cfg.lr, batch_no, total_batches, 0.02);
            batch_no += 1;
            opt.step_with_lr(&mut params, &grads, lr);
        }
        let mean = acc / train.len() as f64;
        epoch_losses.push(mean);
        log::info!("encoder epoch {epoch}: loss {mean:.5}");
        if !mean.is_finite() {
            return Err(InversionError::Diverged { epoch, trace: epoch_losses });
        }
    }
    let heldout_loss = mean_encoder_loss(&enc, g, loss, heldout, cfg)?;
    if cfg.max_heldout_loss.is_some_and(|m| heldout_loss > m) {
        return Err(InversionError::Diverged { epoch: cfg.epochs, trace: epoch_losses });
    }
    Ok((enc, EncoderReport { epoch_losses, heldout_loss }))
}

pub fn mean_encoder_loss(
    enc: &Encoder,
    g: &LayeredGenerator,
    loss: &ReconstructionLoss,
    samples: &[EncoderSample],
    cfg: &EncoderTrainConfig,
) -> Result<f64, InversionError> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut acc = 0.0;
    for s in samples {
        acc += sample_loss(enc, g, loss, s, cfg, false)?.0;
    }
    Ok(acc / samples.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefineConfig {
    pub steps: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine schedule).
    pub lr_floor: f64,
    /// Optimize in the model's latent chart when it has one.
    #[serde(default = "yes")]
    pub subspace: bool,
}

fn yes() -> bool {
    true
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { steps: 700, lr: 0.05, lr_floor: 0.0, subspace: true }
    }
}

/// Affine subspace `offset + basisᵀ·v` of latent codes, with orthonormal
/// basis rows. Refining in chart coordinates plays the role of optimizing
/// an earlier linear layer and pushing forward.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentChart {
    pub offset: Array3<f32>,
    pub basis: Array2<f32>,
}

impl LatentChart {
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Coordinates of the orthogonal projection of `z`.
    pub fn project(&self, z: &Array3<f32>) -> Array1<f32> {
        let d = z - &self.offset;
        self.basis.dot(&ArrayView1::from(d.as_slice().expect("standard layout")))
    }

    pub fn embed(&self, v: &Array1<f32>) -> Array3<f32> {
        let flat = self.basis.t().dot(v);
        &self.offset + &flat.into_shape_with_order(self.offset.raw_dim()).expect("basis width matches offset")
    }

    /// Gradient with respect to the coordinates.
    pub fn pullback(&self, dz: &Array3<f32>) -> Array1<f32> {
        self.basis.dot(&ArrayView1::from(dz.as_slice().expect("standard layout")))
    }
}

/// [`refine_code`] over chart coordinates; returns the best code seen and
/// the best-so-far loss trace.
pub fn refine_in_chart(
    g: &LayeredGenerator,
    loss: &ReconstructionLoss,
    target: &Array3<f32>,
    chart: &LatentChart,
    z0: &Array3<f32>,
    cfg: &RefineConfig,
) -> Result<(Array3<f32>, Vec<f64>), InversionError> {
    let prep = loss.prepare(target);
    let mut v = chart.project(z0);
    let mut best = chart.embed(&v);
    let mut best_loss = f64::INFINITY;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut opt = Adam::new(cfg.lr);
    let req = BackwardRequest { input: true, weights_from: None, deltas: false };
    for step in 0..=cfg.steps {
        let z = chart.embed(&v);
        let tr = g.forward_traced(&z, 0, g.n_layers(), None)?;
        let (l, dy) = loss.eval(&prep, &tr.output, step < cfg.steps);
        let l = l as f64;
        if !l.is_finite() {
            return Err(InversionError::NonFinite { step, last_loss: best_loss });
        }
        if l < best_loss {
            best_loss = l;
            best = z;
        }
        trace.push(best_loss);
        if step == cfg.steps || l == 0.0 {
            break;
        }
        let dv = chart.pullback(&g.backward(&tr, &dy.unwrap(), None, &req).input.unwrap());
        let lr = cosine_lr(cfg.lr, step, cfg.steps, cfg.lr_floor);
        opt.step_with_lr(&mut [v.as_slice_mut().unwrap()], &[dv.as_slice().unwrap()], lr);
    }
    Ok((best, trace))
}

#[derive(Clone, Debug)]
pub struct InversionResult {
    pub z: LatentCode,
    /// Best-so-far loss before step 1 and after every step.
    pub loss_trace: Vec<f64>,
    pub psnr: f64,
    pub pearson_r: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct InversionRecord {
    latent_archive: String,
    boundary: usize,
    loss_trace: Vec<f64>,
    psnr: f64,
    pearson_r: Option<f64>,
}

impl InversionResult {
    pub fn with_truth(mut self, z_true: &LatentCode) -> Self {
        self.pearson_r = Some(pearson(self.z.as_slice(), z_true.as_slice()));
        self
    }

    /// Writes `<path>` (JSON) and the latent as a sidecar `<path>.arc`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), InversionError> {
        let path = path.as_ref();
        let arc = path.with_extension("arc");
        self.z.to_archive().save(&arc)?;
        let rec = InversionRecord {
            latent_archive: arc.file_name().unwrap().to_string_lossy().into_owned(),
            boundary: self.z.boundary,
            loss_trace: self.loss_trace.clone(),
            psnr: self.psnr,
            pearson_r: self.pearson_r,
        };
        std::fs::write(path, serde_json::to_vec_pretty(&rec).expect("record serializes"))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, InversionError> {
        let path = path.as_ref();
        let rec: InversionRecord = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| ArchiveError::Manifest(e.to_string()))?;
        let arc = path.parent().unwrap_or(Path::new(".")).join(&rec.latent_archive);
        let z = LatentCode::from_archive(&Archive::load(arc)?)?;
        Ok(Self { z, loss_trace: rec.loss_trace, psnr: rec.psnr, pearson_r: rec.pearson_r })
    }
}

/// Adam on a code at boundary `from`, minimizing the reconstruction loss of
/// the generator output against `target`. Returns the best code seen, the
/// best-so-far loss trace and the raw loss trace.
pub fn refine_code<T: Real>(
    g: &LayeredGenerator<T>,
    loss: &ReconstructionLoss<T>,
    target: &Array3<T>,
    z0: &Array3<T>,
    from: usize,
    cfg: &RefineConfig,
) -> Result<(Array3<T>, Vec<f64>, Vec<f64>), InversionError> {
    let prep = loss.prepare(target);
    let mut z = z0.clone();
    let mut best = z.clone();
    let mut best_loss = f64::INFINITY;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut raw = Vec::with_capacity(cfg.steps + 1);
    let mut opt = Adam::new(cfg.lr);
    let req = BackwardRequest { input: true, weights_from: None, deltas: false };
    for step in 0..=cfg.steps {
        let tr = g.forward_traced(&z, from, g.n_layers(), None)?;
        let (l, dy) = loss.eval(&prep, &tr.output, step < cfg.steps);
        let l = l.to_f64().unwrap_or(f64::NAN);
        if !l.is_finite() {
            return Err(InversionError::NonFinite { step, last_loss: best_loss });
        }
        raw.push(l);
        if l < best_loss {
            best_loss = l;
            best.assign(&z);
        }
        trace.push(best_loss);
        if step == cfg.steps || l == 0.0 {
            break;
        }
        let dz = g.backward(&tr, &dy.unwrap(), None, &req).input.unwrap();
        let lr = cosine_lr(cfg.lr, step, cfg.steps, cfg.lr_floor);
        opt.step_with_lr(&mut [z.as_slice_mut().unwrap()], &[dz.as_slice().unwrap()], lr);
    }
    Ok((best, trace, raw))
}

/// Refines `z_init` (at boundary `j`) against `x` and returns the code at
/// `edit_boundary >= j`, pushed forward through layers `j+1..=edit_boundary`.
pub fn refine_latent(
    g: &LayeredGenerator,
    loss: &ReconstructionLoss,
    x: &Image,
    z_init: &LatentCode,
    edit_boundary: usize,
    cfg: &RefineConfig,
) -> Result<InversionResult, InversionError> {
    if z_init.boundary > edit_boundary {
        return Err(InversionError::Boundary { variables: z_init.boundary, target: edit_boundary });
    }
    let (best, trace, _) = refine_code(g, loss, &x.pixels, &z_init.values, z_init.boundary, cfg)?;
    let vars = LatentCode::new(best, z_init.boundary);
    let z = g.forward_to(&vars, edit_boundary)?;
    let out = Image { pixels: g.forward_range(&vars.values, vars.boundary, g.n_layers(), None)?, segmentation: None };
    Ok(InversionResult { z, loss_trace: trace, psnr: psnr(&out, x, None), pearson_r: None })
}

/// Encoder estimate followed by refinement, with the code at boundary 0.
/// With a chart (and `cfg.subspace`) the estimate is projected onto it and
/// refined there.
pub fn invert(
    g: &LayeredGenerator,
    enc: &Encoder,
    loss: &ReconstructionLoss,
    x: &Image,
    cfg: &RefineConfig,
    chart: Option<&LatentChart>,
) -> Result<InversionResult, InversionError> {
    let z0 = enc.encode(x)?;
    match chart.filter(|_| cfg.subspace) {
        Some(chart) => {
            let (z, trace) = refine_in_chart(g, loss, &x.pixels, chart, &z0.values, cfg)?;
            let z = LatentCode::new(z, 0);
            let out = g.forward(&z)?;
            Ok(InversionResult { psnr: psnr(&out, x, None), z, loss_trace: trace, pearson_r: None })
        }
        None => refine_latent(g, loss, x, &z0, 0, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::LayerSpec;
    use crate::perceptual::PerceptualExtractor;
    use rand::Rng;

    fn micro() -> LayeredGenerator<f64> {
        let specs = vec![
            LayerSpec::conv(4, 6, 1, 1, Activation::LeakyRelu),
            LayerSpec::conv(6, 3, 3, 2, Activation::Tanh),
        ];
        LayeredGenerator::random(specs, 1, [4, 2, 2], 5).unwrap()
    }

    fn rand3(shape: [usize; 3], seed: u64, scale: f64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((shape[0], shape[1], shape[2]), |_| scale * rng.random_range(-1.0..1.0))
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        let g = micro();
        let loss = ReconstructionLoss::new(PerceptualExtractor::<f64>::random(2));
        let target = rand3([3, 4, 4], 3, 0.8);
        let z = rand3([4, 2, 2], 4, 1.0);
        let prep = loss.prepare(&target);
        let f = |z: &Array3<f64>| loss.eval(&prep, &g.forward_range(z, 0, 2, None).unwrap(), false).0;
        let tr = g.forward_traced(&z, 0, 2, None).unwrap();
        let (_, dy) = loss.eval(&prep, &tr.output, true);
        let req = BackwardRequest { input: true, weights_from: None, deltas: false };
        let dz = g.backward(&tr, &dy.unwrap(), None, &req).input.unwrap();
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..8 {
            let idx = [rng.random_range(0..4), rng.random_range(0..2), rng.random_range(0..2)];
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[idx] += h;
            zm[idx] -= h;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            let rel = (fd - dz[idx]).abs() / fd.abs().max(1e-8);
            assert!(rel <= 1e-3, "coord {idx:?}: fd {fd} analytic {}", dz[idx]);
        }
    }

    #[test]
    fn true_latent_is_a_fixed_point() {
        let g = micro().cast::<f32>();
        let z = LatentCode::new(rand3([4, 2, 2], 1, 1.0).mapv(|v| v as f32), 0);
        let x = g.forward(&z).unwrap();
        let loss = ReconstructionLoss::new(PerceptualExtractor::random(1));
        let res = refine_latent(&g, &loss, &x, &z, 0, &RefineConfig { steps: 50, ..Default::default() }).unwrap();
        let num: f32 = (&res.z.values - &z.values).iter().map(|v| v * v).sum::<f32>().sqrt();
        let den: f32 = z.values.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!(num / den <= 1e-3);
        assert!(res.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    /// Single linear layer: G(z) = W z + b, so the exact inverse of an
    /// in-range image is the least-squares solution.
    #[test]
    fn linear_generator_recovers_least_squares_solution() {
        let specs = vec![
            LayerSpec::conv(3, 3, 1, 1, Activation::Identity),
            LayerSpec::conv(3, 3, 1, 1, Activation::Identity),
        ];
        let mut g = LayeredGenerator::<f64>::random(specs, 1, [3, 2, 2], 3).unwrap();
        g.layers[1].conv.weight = ndarray::Array2::eye(3);
        let w1 = g.layers[0].conv.weight.clone();
        let b1 = g.layers[0].conv.bias.clone();
        let z_true = rand3([3, 2, 2], 7, 0.3);
        let target = g.forward_range(&z_true, 0, 2, None).unwrap();
        // least squares per pixel via normal equations on the 3x3 system
        let wm = nalgebra::DMatrix::from_fn(3, 3, |i, j| w1[[i, j]]);
        let mut lsq = Array3::<f64>::zeros((3, 2, 2));
        for y in 0..2 {
            for x in 0..2 {
                let rhs = nalgebra::DVector::from_fn(3, |i, _| target[[i, y, x]] - b1[i]);
                let sol = (wm.transpose() * &wm).lu().solve(&(wm.transpose() * rhs)).unwrap();
                for i in 0..3 {
                    lsq[[i, y, x]] = sol[i];
                }
            }
        }
        let cfg = RefineConfig { steps: 3000, lr: 0.05, ..Default::default() };
        let (z, _, _) = refine_code(&g, &ReconstructionLoss::pixel_only(), &target, &Array3::zeros((3, 2, 2)), 0, &cfg).unwrap();
        let err = (&z - &lsq).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-4, "max deviation {err}");
    }

    #[test]
    fn pushes_forward_from_earlier_boundary() {
        let g = micro().cast::<f32>();
        let z = LatentCode::new(rand3([4, 2, 2], 2, 1.0).mapv(|v| v as f32), 0);
        let x = g.forward(&z).unwrap();
        let res = refine_latent(&g, &ReconstructionLoss::pixel_only(), &x, &z, 1, &RefineConfig { steps: 3, ..Default::default() }).unwrap();
        assert_eq!(res.z.boundary, 1);
        assert_eq!(res.z, g.forward_high(&z).unwrap());
        let bad = LatentCode::new(Array3::zeros((6, 2, 2)), 1);
        assert!(matches!(refine_latent(&g, &ReconstructionLoss::pixel_only(), &x, &bad, 0, &RefineConfig::default()), Err(InversionError::Boundary { .. })));
    }

    #[test]
    fn non_finite_target_aborts() {
        let g = micro().cast::<f32>();
        let mut target = Array3::<f32>::zeros((3, 4, 4));
        target[[0, 0, 0]] = f32::NAN;
        let err = refine_code(&g, &ReconstructionLoss::pixel_only(), &target, &Array3::zeros((4, 2, 2)), 0, &RefineConfig::default()).unwrap_err();
        assert!(matches!(err, InversionError::NonFinite { step: 0, .. }));
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        let cfg = EncoderConfig { stem_channels: 3, widths: vec![4, 5], blocks_per_stage: 2, seed: 1 };
        let enc = Encoder::<f64>::new(8, [2, 2, 2], cfg).unwrap();
        let x = rand3([3, 8, 8], 2, 1.0);
        let probe = rand3([2, 2, 2], 3, 1.0);
        let tr = enc.forward_traced(&x);
        let grads = enc.backward(&tr, &probe);
        let h = 1e-6;
        let n = enc.convs().len();
        for ci in 0..n {
            let (mut ep, mut em) = (enc.clone(), enc.clone());
            ep.convs_mut()[ci].weight[[0, 1]] += h;
            em.convs_mut()[ci].weight[[0, 1]] -= h;
            let fd = ((&ep.forward(&x) * &probe).sum() - (&em.forward(&x) * &probe).sum()) / (2.0 * h);
            let an = grads[ci].weight[[0, 1]];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "conv {ci}: {fd} vs {an}");
        }
    }

    #[test]
    fn encoder_training_is_deterministic_and_fits() {
        let specs = vec![
            LayerSpec::conv(4, 6, 1, 1, Activation::LeakyRelu),
            LayerSpec::conv(6, 3, 3, 2, Activation::Tanh),
        ];
        let g = LayeredGenerator::<f32>::random(specs, 1, [4, 2, 2], 5).unwrap();
        let samples: Vec<EncoderSample> = (0..8)
            .map(|i| {
                let z = LatentCode::new(rand3([4, 2, 2], 100 + i, 1.0).mapv(|v| v as f32), 0);
                EncoderSample { image: g.forward(&z).unwrap(), latent: Some(z) }
            })
            .collect();
        let ecfg = EncoderConfig { stem_channels: 4, widths: vec![8], blocks_per_stage: 1, seed: 2 };
        let tcfg = EncoderTrainConfig { epochs: 20, batch_size: 4, lr: 3e-3, ..Default::default() };
        let loss = ReconstructionLoss::pixel_only();
        let (a, rep) = train_encoder(&g, &samples, &samples, &loss, ecfg.clone(), &tcfg).unwrap();
        let (b, _) = train_encoder(&g, &samples, &samples, &loss, ecfg, &tcfg).unwrap();
        assert_eq!(a, b);
        assert!(rep.epoch_losses.last().unwrap() < &rep.epoch_losses[0]);
        // fit sanity: a training image scores no worse than the dataset mean
        let per: Vec<f64> = samples
            .iter()
            .map(|s| mean_encoder_loss(&a, &g, &loss, std::slice::from_ref(s), &tcfg).unwrap())
            .collect();
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        assert!(per.iter().any(|&l| l <= mean));
    }

    #[test]
    fn result_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let res = InversionResult {
            z: LatentCode::new(Array3::from_elem((2, 1, 1), 0.5), 0),
            loss_trace: vec![1.0, 0.5],
            psnr: 21.5,
            pearson_r: Some(0.99),
        };
        let p = dir.path().join("inv.json");
        res.save(&p).unwrap();
        let back = InversionResult::load(&p).unwrap();
        assert_eq!(back.z, res.z);
        assert_eq!(back.loss_trace, res.loss_trace);
        assert_eq!(back.pearson_r, Some(0.99));
    }
}
