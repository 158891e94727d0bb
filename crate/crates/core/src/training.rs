//! Desk-scale generator training on synthetic scenes.
//!
//! Training is deterministic reconstruction with per-scene latent codes
//! (no discriminator). Part of every latent is *planted*: for each scene
//! class a few channels are pinned to that class's per-cell coverage of the
//! scene, so the generator learns channels that control class layout. The
//! remaining *free* channels are learned jointly with the weights and carry
//! appearance.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::NamedArray;
use crate::generator::{grad_slices, BackwardRequest, GeneratorError, GeneratorGrads, LatentCode, LayeredGenerator};
use crate::image::{psnr, Image};
use crate::inversion::LatentChart;
use crate::nn::{cosine_lr, Adam};
use crate::perceptual::ReconstructionLoss;
use crate::scenes::{class_coverage, SceneSpec, NUM_CLASSES};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training did not converge: held-out PSNR {heldout_psnr:.2} dB < {threshold:.2} dB (final loss {final_loss:.5})")]
    NotConverged { final_loss: f64, heldout_psnr: f64, threshold: f64 },
    #[error("loss became non-finite at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("training images must carry segmentations")]
    MissingSegmentation,
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedClass {
    pub class: u8,
    pub channels: Vec<usize>,
}

/// Which latent channels are pinned to class coverage, and the prior used
/// for the free channels when sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentLayout {
    pub shape: [usize; 3],
    pub planted: Vec<PlantedClass>,
    pub planted_gain: f32,
    pub free_std: f32,
    /// Gaussian fitted to the learned training codes. Without it free
    /// entries are iid `N(0, free_std²)`.
    #[serde(skip)]
    pub prior: Option<FreePrior>,
}

/// `mean + factorᵀ·ε` with `ε ~ N(0, I)` over the free entries, flattened
/// channel-major in [`LatentLayout::free_channels`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct FreePrior {
    pub mean: Array1<f32>,
    pub factor: Array2<f32>,
}

impl FreePrior {
    /// Sample covariance of `codes` (one flattened code per row), kept in
    /// factored form.
    pub fn fit(codes: &Array2<f32>) -> Self {
        let n = codes.nrows();
        let mean = codes.mean_axis(Axis(0)).expect("at least one code");
        let scale = 1.0 / ((n.max(2) - 1) as f32).sqrt();
        let factor = (codes - &mean) * scale;
        Self { mean, factor }
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> Array1<f32> {
        let eps = Array1::from_shape_fn(self.factor.nrows(), |_| StandardNormal.sample(rng));
        &self.mean + &self.factor.t().dot(&eps)
    }
}

impl LatentLayout {
    /// `per_class` planted channels per scene class, chosen by a seeded
    /// permutation of the channel axis.
    pub fn seeded(shape: [usize; 3], per_class: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..shape[0]).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let planted = (0..NUM_CLASSES)
            .map(|c| {
                let mut channels = idx[c * per_class..(c + 1) * per_class].to_vec();
                channels.sort_unstable();
                PlantedClass { class: c as u8, channels }
            })
            .collect();
        Self { shape, planted, planted_gain: 2.0, free_std: 0.5, prior: None }
    }

    pub fn is_planted(&self, channel: usize) -> bool {
        self.planted.iter().any(|p| p.channels.contains(&channel))
    }

    pub fn free_channels(&self) -> Vec<usize> {
        (0..self.shape[0]).filter(|&c| !self.is_planted(c)).collect()
    }

    /// Latent with planted channels set from `seg` and free channels zero.
    pub fn planted_code(&self, seg: &ndarray::Array2<u8>) -> Array3<f32> {
        let [c, h, w] = self.shape;
        let cov = class_coverage(seg, h, w);
        let mut z = Array3::zeros((c, h, w));
        for p in &self.planted {
            for &ch in &p.channels {
                let src = cov.index_axis(Axis(0), p.class as usize);
                z.index_axis_mut(Axis(0), ch).assign(&src.mapv(|v| v * self.planted_gain));
            }
        }
        z
    }

    /// Draws a latent: layout from a fresh scene, free channels Gaussian.
    pub fn sample(&self, seed: u64, image_size: usize) -> LatentCode {
        let scene = SceneSpec::from_seed(seed).render(image_size);
        let mut z = self.planted_code(scene.segmentation.as_ref().expect("scenes carry segmentation"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
        match &self.prior {
            Some(p) => self.set_free(&mut z, p.sample(&mut rng).as_slice().unwrap()),
            None => {
                let normal = Normal::new(0.0f32, self.free_std).expect("valid std");
                for ch in self.free_channels() {
                    z.index_axis_mut(Axis(0), ch).mapv_inplace(|_| normal.sample(&mut rng));
                }
            }
        }
        LatentCode::new(z, 0)
    }

    /// Free entries of `z`, flattened channel-major.
    pub fn free_values(&self, z: &Array3<f32>) -> Vec<f32> {
        self.free_channels().iter().flat_map(|&c| z.index_axis(Axis(0), c).iter().copied().collect::<Vec<_>>()).collect()
    }

    fn set_free(&self, z: &mut Array3<f32>, values: &[f32]) {
        let cells = self.shape[1] * self.shape[2];
        for (k, ch) in self.free_channels().into_iter().enumerate() {
            let src = &values[k * cells..(k + 1) * cells];
            z.index_axis_mut(Axis(0), ch).iter_mut().zip(src).for_each(|(d, &v)| *d = v);
        }
    }

    /// Chart spanned by the prior: one coordinate per class and cell for
    /// the (identical) planted channels, free entries on
    /// `mean + span(factor)`. `None` without a fitted prior.
    pub fn chart(&self) -> Option<LatentChart> {
        let prior = self.prior.as_ref()?;
        let [c, h, w] = self.shape;
        let cells = h * w;
        let free = self.free_channels();
        let f = &prior.factor;
        let m = nalgebra::DMatrix::from_fn(f.nrows(), f.ncols(), |i, j| f[[i, j]] as f64);
        let svd = m.svd(false, true);
        let vt = svd.v_t.expect("requested");
        let top = svd.singular_values.max();
        let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > 1e-6 * top).collect();
        let tied: Vec<&PlantedClass> = self.planted.iter().filter(|p| !p.channels.is_empty()).collect();
        let rows = tied.len() * cells + keep.len();
        let mut basis = Array2::zeros((rows, c * cells));
        let mut r = 0;
        for p in &tied {
            let v = 1.0 / (p.channels.len() as f32).sqrt();
            for k in 0..cells {
                for &ch in &p.channels {
                    basis[[r, ch * cells + k]] = v;
                }
                r += 1;
            }
        }
        for &i in &keep {
            for (j, &ch) in free.iter().enumerate() {
                for k in 0..cells {
                    basis[[r, ch * cells + k]] = vt[(i, j * cells + k)] as f32;
                }
            }
            r += 1;
        }
        let mut offset = Array3::zeros((c, h, w));
        self.set_free(&mut offset, prior.mean.as_slice().expect("contiguous"));
        Some(LatentChart { offset, basis })
    }

    pub fn from_generator(g: &LayeredGenerator) -> Option<Self> {
        let mut layout: Self = serde_json::from_value(g.extra.get("layout")?.clone()).ok()?;
        if let (Some(m), Some(f)) = (g.aux.get("free_prior.mean"), g.aux.get("free_prior.factor")) {
            layout.prior = Some(FreePrior { mean: m.to_array1().ok()?, factor: f.to_array2().ok()? });
        }
        Some(layout)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub latent_lr: f64,
    /// Weight of `mean(free²)` per sample.
    pub latent_l2: f64,
    pub planted_per_class: usize,
    /// Std of the initial free codes.
    #[serde(default = "default_free_init_std")]
    pub free_init_std: f32,
    /// Store a Gaussian fitted to the learned codes as the sampling prior.
    #[serde(default)]
    pub fit_prior: bool,
    pub heldout_steps: usize,
    pub min_heldout_psnr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 120,
            batch_size: 8,
            lr: 2e-3,
            latent_lr: 2e-2,
            latent_l2: 1e-2,
            planted_per_class: 4,
            free_init_std: 0.05,
            fit_prior: true,
            heldout_steps: 150,
            min_heldout_psnr: 20.0,
        }
    }
}

fn default_free_init_std() -> f32 {
    0.5
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub heldout_psnr: f64,
}

/// Trains a generator on segmented scenes. Returns the generator (with its
/// latent layout stored in `extra`), the learned training latents and a
/// report. Fails loudly when the held-out PSNR misses the threshold.
pub fn train_toy_generator(
    init: LayeredGenerator,
    train: &[Image],
    heldout: &[Image],
    loss: &ReconstructionLoss,
    config: &TrainConfig,
) -> Result<(LayeredGenerator, Vec<LatentCode>, TrainReport), TrainError> {
    let mut g = init;
    let shape = g.latent_shape();
    let mut layout = LatentLayout::seeded(shape, config.planted_per_class, config.seed);
    let segs: Vec<_> = train
        .iter()
        .map(|im| im.segmentation.clone().ok_or(TrainError::MissingSegmentation))
        .collect::<Result<_, _>>()?;
    let planted: Vec<Array3<f32>> = segs.iter().map(|s| layout.planted_code(s)).collect();
    let free = layout.free_channels();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0f32, config.free_init_std).expect("valid std");
    let mut free_codes: Vec<Array3<f32>> = (0..train.len())
        .map(|_| {
            let mut z = Array3::zeros((shape[0], shape[1], shape[2]));
            for &ch in &free {
                z.index_axis_mut(Axis(0), ch).mapv_inplace(|_| normal.sample(&mut rng));
            }
            z
        })
        .collect();
    let mut latent_opts: Vec<Adam> = (0..train.len()).map(|_| Adam::new(config.latent_lr)).collect();
    let mut opt = Adam::new(config.lr);

    let initial_loss = mean_loss(&g, train, &planted, &free_codes, loss);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let total_batches = config.epochs * train.len().div_ceil(config.batch_size.max(1));
    let mut batch_no = 0;
    let req = BackwardRequest { input: true, weights_from: Some(1), deltas: false };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut acc = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut grads: Option<GeneratorGrads<f32>> = None;
            for &i in batch {
                let z = &planted[i] + &free_codes[i];
                let trace = g.forward_traced(&z, 0, g.n_layers(), None)?;
                let target = loss.prepare(&train[i].pixels);
                let (l, dy) = loss.eval(&target, &trace.output, true);
                let reg = config.latent_l2 * free_codes[i].iter().map(|v| (v * v) as f64).sum::<f64>()
                    / free_codes[i].len() as f64;
                acc += l as f64 + reg;
                let res = g.backward(&trace, &dy.expect("grad requested"), None, &req);
                let mut dz = res.input.expect("input grad requested");
                let k = (2.0 * config.latent_l2 / free_codes[i].len() as f64) as f32;
                dz.zip_mut_with(&free_codes[i], |d, &v| *d += k * v);
                // planted channels are pinned
                for p in &layout.planted {
                    for &ch in &p.channels {
                        dz.index_axis_mut(Axis(0), ch).fill(0.0);
                    }
                }
                let code = free_codes[i].as_slice_mut().unwrap();
                latent_opts[i].step(&mut [code], &[dz.as_slice().unwrap()]);
                let w = res.weights.expect("weight grads requested");
                match grads.as_mut() {
                    Some(a) => a.add_assign(&w),
                    None => grads = Some(w),
                }
            }
            let mut grads = grads.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f32);
            let lr = cosine_lr(config.lr, batch_no, total_batches, 0.05);
            batch_no += 1;
            let gs = grad_slices(&grads, 1);
            opt.step_with_lr(&mut g.params_mut(1), &gs, lr);
        }
        let mean = acc / train.len() as f64;
        if !mean.is_finite() {
            return Err(TrainError::NonFinite { epoch });
        }
        log::info!("epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    let final_loss = mean_loss(&g, train, &planted, &free_codes, loss);

    let n_free: usize = free_codes.iter().map(|z| free.len() * z.dim().1 * z.dim().2).sum();
    let ss: f64 = free_codes.iter().map(|z| z.iter().map(|v| (v * v) as f64).sum::<f64>()).sum();
    if n_free > 0 && config.epochs > 0 {
        layout.free_std = (ss / n_free as f64).sqrt() as f32;
    }
    g.extra = serde_json::json!({ "layout": layout, "train_config": config });
    if config.fit_prior && config.epochs > 0 && !free_codes.is_empty() {
        let rows: Vec<f32> = free_codes.iter().flat_map(|z| layout.free_values(z)).collect();
        let prior = FreePrior::fit(&Array2::from_shape_vec((free_codes.len(), rows.len() / free_codes.len()), rows).unwrap());
        g.aux.insert("free_prior.mean".into(), NamedArray { shape: vec![prior.mean.len()], data: prior.mean.to_vec() });
        g.aux.insert(
            "free_prior.factor".into(),
            NamedArray { shape: prior.factor.shape().to_vec(), data: prior.factor.iter().copied().collect() },
        );
        layout.prior = Some(prior);
    }

    let heldout_psnr = heldout_fit_psnr(&g, &layout, heldout, loss, config.heldout_steps)?;
    let report = TrainReport { initial_loss, epoch_losses, final_loss, heldout_psnr };
    if config.epochs > 0 && heldout_psnr < config.min_heldout_psnr {
        return Err(TrainError::NotConverged { final_loss, heldout_psnr, threshold: config.min_heldout_psnr });
    }
    let latents = planted.iter().zip(&free_codes).map(|(p, f)| LatentCode::new(p + f, 0)).collect();
    Ok((g, latents, report))
}

fn mean_loss(
    g: &LayeredGenerator,
    imgs: &[Image],
    planted: &[Array3<f32>],
    free: &[Array3<f32>],
    loss: &ReconstructionLoss,
) -> f64 {
    let mut acc = 0.0;
    for i in 0..imgs.len() {
        let z = &planted[i] + &free[i];
        let out = g.forward_range(&z, 0, g.n_layers(), None).expect("shapes validated");
        acc += loss.eval(&loss.prepare(&imgs[i].pixels), &out, false).0 as f64;
    }
    acc / imgs.len().max(1) as f64
}

/// Mean PSNR after fitting only the free channels of held-out scenes with
/// the weights frozen.
pub fn heldout_fit_psnr(
    g: &LayeredGenerator,
    layout: &LatentLayout,
    heldout: &[Image],
    loss: &ReconstructionLoss,
    steps: usize,
) -> Result<f64, TrainError> {
    if heldout.is_empty() {
        return Ok(f64::NAN);
    }
    let free = layout.free_channels();
    let req = BackwardRequest { input: true, weights_from: None, deltas: false };
    let mut total = 0.0;
    for img in heldout {
        let seg = img.segmentation.as_ref().ok_or(TrainError::MissingSegmentation)?;
        let mut z = layout.planted_code(seg);
        let target = loss.prepare(&img.pixels);
        let mut opt = Adam::new(0.05);
        for step in 0..steps {
            let trace = g.forward_traced(&z, 0, g.n_layers(), None)?;
            let (_, dy) = loss.eval(&target, &trace.output, true);
            let mut dz = g.backward(&trace, &dy.unwrap(), None, &req).input.unwrap();
            for ch in 0..dz.dim().0 {
                if !free.contains(&ch) {
                    dz.index_axis_mut(Axis(0), ch).fill(0.0);
                }
            }
            let lr = cosine_lr(0.05, step, steps, 0.05);
            opt.step_with_lr(&mut [z.as_slice_mut().unwrap()], &[dz.as_slice().unwrap()], lr);
        }
        let out = g.forward(&LatentCode::new(z, 0))?;
        total += psnr(&out, img, None);
    }
    Ok(total / heldout.len() as f64)
}
