//! Loading a trained model set and running the end-to-end steps on it.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dissection::{activations_at, build_catalog, layout_sample, DissectionConfig, DissectionError, UnitCatalog};
use crate::editing::{apply_edit, strength_preset, EditMode, EditOp, RegionMask, StrengthLevel, StyleGallery};
use crate::generator::{toy_architecture, GeneratorError, LatentCode, LayeredGenerator};
use crate::image::Image;
use crate::inversion::{
    LatentChart,
    invert, train_encoder, Encoder, EncoderConfig, EncoderReport, EncoderSample, EncoderTrainConfig, InversionError,
    InversionResult, RefineConfig,
};
use crate::perceptual::{PerceptualExtractor, ReconstructionLoss, DEFAULT_EXTRACTOR_SEED};
use crate::scenes::{make_synthetic_dataset, SceneError};
use crate::training::{train_toy_generator, LatentLayout, TrainConfig, TrainError, TrainReport};

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("generator: {0}")]
    Generator(#[from] GeneratorError),
    #[error("encoder: {0}")]
    Encoder(#[from] InversionError),
    #[error("catalog: {0}")]
    Catalog(#[from] DissectionError),
    #[error("catalog was built for checkpoint {catalog}, generator is {generator}")]
    CatalogMismatch { catalog: String, generator: String },
    #[error("training: {0}")]
    Training(#[from] TrainError),
    #[error("dataset: {0}")]
    Scenes(#[from] SceneError),
    #[error("generator has no latent layout; was it trained by this toolkit?")]
    NoLayout,
    #[error("edit: {0}")]
    Edit(String),
}

/// Archive locations of one model set.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPaths {
    pub generator: PathBuf,
    pub encoder: PathBuf,
    pub catalog: PathBuf,
}

impl ModelPaths {
    /// `<dir>/<name>.{gen,enc,catalog}.arc`.
    pub fn named(dir: impl AsRef<Path>, name: &str) -> Self {
        let d = dir.as_ref();
        Self {
            generator: d.join(format!("{name}.gen.arc")),
            encoder: d.join(format!("{name}.enc.arc")),
            catalog: d.join(format!("{name}.catalog.arc")),
        }
    }

    /// Accepts either a model name or a path to a generator archive; sibling
    /// archives are found by replacing the `.gen.arc` suffix.
    pub fn resolve(spec: &str, models_dir: impl AsRef<Path>) -> Self {
        let p = Path::new(spec);
        if spec.ends_with(".arc") || p.exists() {
            let stem = spec.strip_suffix(".gen.arc").unwrap_or(spec.trim_end_matches(".arc"));
            let base = Path::new(stem);
            let dir = base.parent().unwrap_or(Path::new("."));
            let name = base.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mut paths = Self::named(dir, &name);
            paths.generator = p.to_path_buf();
            return paths;
        }
        Self::named(models_dir, spec)
    }
}

/// Generator, encoder, catalog and reconstruction loss used together.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub generator: Arc<LayeredGenerator>,
    pub encoder: Encoder,
    pub catalog: UnitCatalog,
    pub loss: ReconstructionLoss,
    /// Span of the sampling prior, when the generator carries one.
    pub chart: Option<Arc<LatentChart>>,
}

impl ModelBundle {
    pub fn new(generator: LayeredGenerator, encoder: Encoder, catalog: UnitCatalog) -> Result<Self, BundleError> {
        let digest = generator.weights_digest();
        if catalog.checkpoint_id != digest {
            return Err(BundleError::CatalogMismatch { catalog: catalog.checkpoint_id.clone(), generator: digest });
        }
        let chart = LatentLayout::from_generator(&generator).and_then(|l| l.chart()).map(Arc::new);
        Ok(Self { generator: Arc::new(generator), encoder, catalog, loss: default_loss(), chart })
    }

    pub fn load(paths: &ModelPaths) -> Result<Self, BundleError> {
        let g = LayeredGenerator::load_checkpoint(&paths.generator)?;
        let e = Encoder::load(&paths.encoder)?;
        let c = UnitCatalog::load(&paths.catalog)?;
        Self::new(g, e, c)
    }

    pub fn image_size(&self) -> (usize, usize) {
        let [_, h, w] = self.generator.output_shape();
        (h, w)
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.catalog.checkpoint_id
    }

    /// Encoder estimate refined against the photo; code at the network input.
    pub fn invert(&self, x: &Image, refine: &RefineConfig) -> Result<InversionResult, InversionError> {
        invert(&self.generator, &self.encoder, &self.loss, x, refine, self.chart.as_deref())
    }
}

/// Pixel L1 plus λ_VGG-weighted features of the fixed-seed extractor.
pub fn default_loss() -> ReconstructionLoss {
    ReconstructionLoss::new(PerceptualExtractor::random(DEFAULT_EXTRACTOR_SEED))
}

/// Everything needed to reproduce a toy model set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyRecipe {
    pub name: String,
    pub seed: u64,
    pub image_size: usize,
    pub train_scenes: usize,
    pub heldout_scenes: usize,
    pub generator: TrainConfig,
    pub encoder_arch: EncoderConfig,
    pub encoder: EncoderTrainConfig,
    pub encoder_samples: usize,
    pub encoder_heldout: usize,
    pub dissection: DissectionConfig,
}

impl Default for ToyRecipe {
    fn default() -> Self {
        Self {
            name: "toy-v1".into(),
            seed: 0,
            image_size: 64,
            train_scenes: 256,
            heldout_scenes: 16,
            generator: TrainConfig::default(),
            encoder_arch: EncoderConfig::default(),
            encoder: EncoderTrainConfig::default(),
            encoder_samples: 2048,
            encoder_heldout: 32,
            dissection: DissectionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ToyReport {
    pub generator: TrainReport,
    pub encoder: EncoderReport,
    pub checkpoint_id: String,
}

/// Generated samples with known latents, drawn from the training layout.
pub fn generated_samples(g: &LayeredGenerator, seed: u64, count: usize) -> Result<Vec<EncoderSample>, BundleError> {
    let layout = LatentLayout::from_generator(g).ok_or(BundleError::NoLayout)?;
    let [_, size, _] = g.output_shape();
    (0..count)
        .map(|i| {
            let z = layout.sample(crate::scenes::scene_seed(seed, i), size);
            Ok(EncoderSample { image: g.forward(&z)?, latent: Some(z) })
        })
        .collect()
}

/// Builds the catalog from the seeded layout sample recorded in `cfg`.
pub fn dissect(g: &LayeredGenerator, cfg: &DissectionConfig) -> Result<UnitCatalog, BundleError> {
    let layout = LatentLayout::from_generator(g).ok_or(BundleError::NoLayout)?;
    let [_, size, _] = g.output_shape();
    let (codes, segs) = layout_sample(&layout, cfg.sample_seed, cfg.sample_size, size);
    let acts = activations_at(g, &codes, cfg.boundary)?;
    Ok(build_catalog(&acts, &segs, cfg, &g.weights_digest())?)
}

/// Trains generator and encoder, then dissects the generator.
pub fn train_toy_bundle(recipe: &ToyRecipe) -> Result<(ModelBundle, ToyReport), BundleError> {
    let loss = default_loss();
    let scenes = make_synthetic_dataset(recipe.seed, recipe.train_scenes + recipe.heldout_scenes, recipe.image_size)?;
    let (train, heldout) = scenes.split_at(recipe.train_scenes);
    let (specs, split, latent) = toy_architecture();
    let init = LayeredGenerator::random(specs, split, latent, recipe.seed)?;
    log::info!("training generator on {} scenes", train.len());
    let (mut g, _, gen_report) = train_toy_generator(init, train, heldout, &loss, &recipe.generator)?;
    g.name = recipe.name.clone();
    let samples = generated_samples(&g, recipe.seed ^ 0xE7C0_DE00, recipe.encoder_samples + recipe.encoder_heldout)?;
    let (tr, ho) = samples.split_at(recipe.encoder_samples);
    log::info!("training encoder on {} generated samples", tr.len());
    let (enc, enc_report) = train_encoder(&g, tr, ho, &loss, recipe.encoder_arch.clone(), &recipe.encoder)?;
    let catalog = dissect(&g, &recipe.dissection)?;
    let checkpoint_id = catalog.checkpoint_id.clone();
    let bundle = ModelBundle::new(g, enc, catalog)?;
    Ok((bundle, ToyReport { generator: gen_report, encoder: enc_report, checkpoint_id }))
}

/// A photo, its inverted code and one edit of it.
#[derive(Clone, Debug)]
pub struct EditFixture {
    pub name: String,
    pub photo: Image,
    pub z: LatentCode,
    pub op: EditOp,
    pub z_e: LatentCode,
    /// Pixel footprint of the edited cells.
    pub mask: Array2<f32>,
}

/// Seed of the held-out scenes used as photos in edit fixtures.
pub const FIXTURE_SCENE_SEED: u64 = 0xF1C7_0000;

/// Deterministic edit fixtures on held-out synthetic scenes. Even fixtures
/// erase the best-covered editable class present in the scene; odd ones
/// draw an editable class into a 2x2 block of cells.
pub fn edit_fixtures(bundle: &ModelBundle, count: usize, refine: &RefineConfig) -> Result<Vec<EditFixture>, BundleError> {
    let (size, _) = bundle.image_size();
    let (gh, gw) = bundle.catalog.grid;
    let editable: Vec<u8> = bundle.catalog.classes.iter().filter(|c| !c.selected().is_empty()).map(|c| c.class).collect();
    if editable.is_empty() {
        return Err(BundleError::Catalog(DissectionError::ClassAbsent("any".into())));
    }
    let scenes = make_synthetic_dataset(FIXTURE_SCENE_SEED, count, size)?;
    let styles = StyleGallery::new();
    scenes
        .into_iter()
        .enumerate()
        .map(|(i, photo)| {
            let seg = photo.segmentation.clone().expect("synthetic scenes carry segmentation");
            let (bh, bw) = (size / gh, size / gw);
            let cover = |class: u8, cy: usize, cx: usize| {
                let block = seg.slice(ndarray::s![cy * bh..(cy + 1) * bh, cx * bw..(cx + 1) * bw]);
                block.iter().filter(|&&v| v == class).count() as f32 / (bh * bw) as f32
            };
            let mut rng = ChaCha8Rng::seed_from_u64(crate::scenes::scene_seed(FIXTURE_SCENE_SEED, i));
            let erase = i % 2 == 0;
            let best_erasable = editable
                .iter()
                .map(|&c| (c, Array2::from_shape_fn((gh, gw), |(y, x)| u8::from(cover(c, y, x) >= 0.5))))
                .filter(|(_, r)| r.iter().any(|&v| v == 1))
                .max_by_key(|(c, r)| (r.iter().filter(|&&v| v == 1).count(), std::cmp::Reverse(*c)));
            let (mode, class, region) = match best_erasable {
                Some((c, r)) if erase => (EditMode::Erase, c, r),
                _ => {
                    let c = editable[rng.random_range(0..editable.len())];
                    let (y0, x0) = (rng.random_range(0..gh - 1), rng.random_range(0..gw - 1));
                    let r = Array2::from_shape_fn((gh, gw), |(y, x)| u8::from((y0..y0 + 2).contains(&y) && (x0..x0 + 2).contains(&x)));
                    (EditMode::Draw, c, r)
                }
            };
            let op = EditOp {
                id: 1,
                mode,
                class,
                region: RegionMask(region),
                strength: strength_preset(StrengthLevel::Med, mode),
                style_source: None,
            };
            let z = bundle.invert(&photo, refine)?.z;
            let z_e = apply_edit(&z, &op, &bundle.catalog, &styles).map_err(|e| BundleError::Edit(e.to_string()))?;
            let mask = op.region.footprint(size, size, 0);
            Ok(EditFixture { name: format!("fixture-{i:02}"), photo, z, op, z_e, mask })
        })
        .collect()
}
