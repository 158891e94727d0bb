//! `latentpaint` batch front end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use latentpaint_core::adaptation::{edit_pixel_mask, optimize_adaptation, AdaptationConfig};
use latentpaint_core::archive::Archive;
use latentpaint_core::compositing::{evaluate, write_metrics_csv, CompositeFixture};
use latentpaint_core::dissection::DissectionConfig;
use latentpaint_core::editing::{replay_ops, EditOp, StyleGallery};
use latentpaint_core::generator::{LatentCode, PerturbMode};
use latentpaint_core::image::{mask_from_png_bytes, Image};
use latentpaint_core::inversion::RefineConfig;
use latentpaint_core::pipeline::{dissect, train_toy_bundle, ModelBundle, ModelPaths, ToyRecipe};

#[derive(Parser)]
#[command(name = "latentpaint", version, about = "Semantic photo editing in a generator's latent space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Model name (resolved in --models-dir) or path to a `.gen.arc` file.
    #[arg(long, default_value = "toy-v1")]
    checkpoint: String,
    #[arg(long, env = "LATENTPAINT_MODELS", default_value = "models")]
    models_dir: PathBuf,
}

impl ModelArgs {
    fn load(&self) -> Result<ModelBundle> {
        let paths = ModelPaths::resolve(&self.checkpoint, &self.models_dir);
        ModelBundle::load(&paths).with_context(|| format!("loading model set {}", paths.generator.display()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy generator and encoder on synthetic scenes, then dissect.
    TrainToy {
        #[arg(long, default_value = "models")]
        out_dir: PathBuf,
        /// JSON recipe; command-line values override it.
        #[arg(long)]
        recipe: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_scenes: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        encoder_samples: Option<usize>,
        #[arg(long)]
        encoder_epochs: Option<usize>,
    },
    /// Recover a latent code for a photo.
    Invert {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = RefineConfig::default().steps)]
        steps: usize,
        #[arg(long, default_value_t = RefineConfig::default().lr)]
        lr: f64,
        /// Also write the reconstruction.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Apply a JSON list of edit operations to a latent code.
    Edit {
        #[arg(long)]
        latent: PathBuf,
        #[arg(long)]
        ops: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Reference latents for restyle edits, as `id=path.arc`.
        #[arg(long = "style", value_parser = parse_style)]
        styles: Vec<(String, PathBuf)>,
        /// Also write `G(z_e)`.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Fit the image-specific generator and render an edited code.
    Adapt {
        #[arg(long)]
        latent: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Edit list whose footprint is excluded from the match loss.
        #[arg(long, conflicts_with = "mask")]
        ops: Option<PathBuf>,
        /// PNG mask (red > 127 marks edited pixels).
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = AdaptationConfig::default().steps)]
        steps: usize,
        #[arg(long, default_value_t = AdaptationConfig::default().lr)]
        lr: f64,
        #[arg(long, default_value_t = AdaptationConfig::default().lambda_reg)]
        lambda_reg: f64,
        #[arg(long)]
        additive: bool,
        /// Std of a random initialization of the perturbations.
        #[arg(long)]
        random_init: Option<f32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        dilation: usize,
        /// Loss trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Save the fitted perturbations.
        #[arg(long)]
        perturbations: Option<PathBuf>,
    },
    /// Compare compositing methods on fixture directories.
    Eval {
        /// Directory of fixtures, each a folder with source.png, target.png,
        /// mask.png and optional `<method>.png` renders.
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "paste,color_transfer,laplacian,poisson")]
        methods: Vec<String>,
        /// CSV output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild the unit catalog of a generator.
    Dissect {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        iou_floor: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_style(s: &str) -> Result<(String, PathBuf), String> {
    let (id, path) = s.split_once('=').ok_or_else(|| format!("expected id=path, got `{s}`"))?;
    Ok((id.to_string(), PathBuf::from(path)))
}

fn load_latent(path: &Path) -> Result<LatentCode> {
    let a = Archive::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(LatentCode::from_archive(&a)?)
}

fn load_ops(path: &Path) -> Result<Vec<EditOp>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing edit list {}", path.display()))
}

fn load_image(path: &Path) -> Result<Image> {
    Image::load_png(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainToy { out_dir, recipe, name, seed, train_scenes, epochs, encoder_samples, encoder_epochs } => {
            let mut r: ToyRecipe = match recipe {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => ToyRecipe::default(),
            };
            if let Some(v) = name {
                r.name = v;
            }
            if let Some(v) = seed {
                r.seed = v;
                r.generator.seed = v;
                r.encoder.seed = v;
                r.encoder_arch.seed = v;
            }
            if let Some(v) = train_scenes {
                r.train_scenes = v;
            }
            if let Some(v) = epochs {
                r.generator.epochs = v;
            }
            if let Some(v) = encoder_samples {
                r.encoder_samples = v;
            }
            if let Some(v) = encoder_epochs {
                r.encoder.epochs = v;
            }
            let (bundle, report) = train_toy_bundle(&r)?;
            fs::create_dir_all(&out_dir)?;
            let paths = ModelPaths::named(&out_dir, &r.name);
            bundle.generator.save_checkpoint(&paths.generator)?;
            bundle.encoder.save(&paths.encoder)?;
            bundle.catalog.save(&paths.catalog)?;
            fs::write(out_dir.join(format!("{}.recipe.json", r.name)), serde_json::to_vec_pretty(&r)?)?;
            fs::write(out_dir.join(format!("{}.report.json", r.name)), serde_json::to_vec_pretty(&report)?)?;
            println!(
                "checkpoint {} held-out PSNR {:.2} dB, encoder held-out loss {:.4}",
                report.checkpoint_id, report.generator.heldout_psnr, report.encoder.heldout_loss
            );
        }
        Command::Invert { image, out, model, steps, lr, render } => {
            let bundle = model.load()?;
            let x = load_image(&image)?;
            let cfg = RefineConfig { steps, lr, ..RefineConfig::default() };
            let res = bundle.invert(&x, &cfg)?;
            res.z.to_archive().save(&out)?;
            if let Some(p) = render {
                bundle.generator.forward(&res.z)?.save_png(p)?;
            }
            println!("PSNR {:.3} dB", res.psnr);
        }
        Command::Edit { latent, ops, out, model, styles, render } => {
            let bundle = model.load()?;
            let z = load_latent(&latent)?;
            let gallery: StyleGallery = styles.iter().map(|(id, p)| Ok((id.clone(), load_latent(p)?))).collect::<Result<_>>()?;
            let ops = load_ops(&ops)?;
            let z_e = replay_ops(&z, &ops, &bundle.catalog, &gallery)?;
            z_e.to_archive().save(&out)?;
            if let Some(p) = render {
                bundle.generator.forward(&z_e)?.save_png(p)?;
            }
            println!("applied {} edits", ops.len());
        }
        Command::Adapt {
            latent, image, ops, mask, out, model, steps, lr, lambda_reg, additive, random_init, seed, dilation, trace, perturbations,
        } => {
            let bundle = model.load()?;
            let z_e = load_latent(&latent)?;
            let x = load_image(&image)?;
            let (h, w) = x.dims();
            let pixel_mask = match (ops, mask) {
                (Some(p), _) => edit_pixel_mask(&load_ops(&p)?, h, w, dilation),
                (None, Some(p)) => mask_from_png_bytes(&fs::read(&p)?)?,
                (None, None) => ndarray::Array2::zeros((h, w)),
            };
            let cfg = AdaptationConfig {
                steps,
                lr,
                lambda_reg,
                seed,
                random_init,
                mask_dilation: dilation,
                mode: if additive { PerturbMode::Additive } else { PerturbMode::Multiplicative },
                ..AdaptationConfig::default()
            };
            let g = Arc::clone(&bundle.generator);
            let (adapted, report) = optimize_adaptation(&g, &z_e, &x, &pixel_mask, &cfg, None, |_, _| {})?;
            let rendered = adapted.render(&z_e)?;
            rendered.save_png(&out)?;
            if let Some(p) = trace {
                report.write_csv(fs::File::create(p)?)?;
            }
            if let Some(p) = perturbations {
                adapted.save(p)?;
            }
            let outside = latentpaint_core::image::psnr(&rendered, &x, Some(&pixel_mask));
            println!("best loss {:.6}, outside-mask PSNR {:.3} dB", report.best(), outside);
        }
        Command::Eval { fixtures, methods, out } => {
            let fx = load_fixtures(&fixtures)?;
            if fx.is_empty() {
                bail!("no fixtures under {}", fixtures.display());
            }
            let rows = evaluate(&methods, &fx)?;
            match out {
                Some(p) => write_metrics_csv(&rows, fs::File::create(p)?)?,
                None => write_metrics_csv(&rows, std::io::stdout().lock())?,
            }
        }
        Command::Dissect { model, out, samples, top_k, iou_floor, seed } => {
            let paths = ModelPaths::resolve(&model.checkpoint, &model.models_dir);
            let g = latentpaint_core::generator::LayeredGenerator::load_checkpoint(&paths.generator)?;
            let mut cfg = DissectionConfig::default();
            if let Some(v) = samples {
                cfg.sample_size = v;
            }
            if let Some(v) = top_k {
                cfg.top_k = v;
            }
            if let Some(v) = iou_floor {
                cfg.iou_floor = v;
            }
            if let Some(v) = seed {
                cfg.sample_seed = v;
            }
            let cat = dissect(&g, &cfg)?;
            cat.save(&out)?;
            for c in &cat.classes {
                let best = c.iou.iter().copied().fold(0.0f32, f32::max);
                println!("{:<9} {:>2} units, best IoU {:.3}", c.name, c.selected().len(), best);
            }
        }
    }
    Ok(())
}

fn load_fixtures(dir: &Path) -> Result<Vec<CompositeFixture>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    entries.sort();
    entries
        .into_iter()
        .map(|d| {
            let mut renders = BTreeMap::new();
            for e in fs::read_dir(&d)? {
                let p = e?.path();
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                if p.extension().is_some_and(|e| e == "png") && !["source", "target", "mask"].contains(&stem.as_str()) {
                    renders.insert(stem, load_image(&p)?);
                }
            }
            Ok(CompositeFixture {
                name: d.file_name().unwrap().to_string_lossy().into_owned(),
                source: load_image(&d.join("source.png"))?,
                target: load_image(&d.join("target.png"))?,
                mask: mask_from_png_bytes(&fs::read(d.join("mask.png"))?)?,
                renders,
            })
        })
        .collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
