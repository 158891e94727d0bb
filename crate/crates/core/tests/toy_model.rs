//! Checks against the committed toy model set. Frozen goldens live in
//! `tests/data/toy-v1.goldens.arc`; set `LATENTPAINT_BLESS=1` to rewrite them
//! after an intentional model change.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use latentpaint_core::adaptation::{fit_preview_generator, optimize_adaptation, AdaptationConfig};
use latentpaint_core::archive::Archive;
use latentpaint_core::image::psnr;
use latentpaint_core::inversion::RefineConfig;
use latentpaint_core::pipeline::{edit_fixtures, generated_samples, ModelBundle, ModelPaths, ToyRecipe, FIXTURE_SCENE_SEED};
use latentpaint_core::scenes::{class_histogram, make_synthetic_dataset};
use latentpaint_core::tensor::pearson;
use latentpaint_core::training::LatentLayout;
use ndarray::{Array2, Array3};

fn models() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn bundle() -> &'static ModelBundle {
    static B: OnceLock<ModelBundle> = OnceLock::new();
    B.get_or_init(|| ModelBundle::load(&ModelPaths::named(models(), "toy-v1")).unwrap())
}

fn goldens_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/toy-v1.goldens.arc")
}

/// Compares `value` with the stored golden `name`, or records it when blessing.
fn golden(name: &str, value: &Array3<f32>, tol: f32) {
    let path = goldens_path();
    if std::env::var_os("LATENTPAINT_BLESS").is_some() {
        static LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
        let _g = LOCK.lock().unwrap();
        let mut a = Archive::load(&path).unwrap_or_else(|_| Archive::new("goldens", serde_json::json!({})));
        a.insert3(name, value);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        a.save(&path).unwrap();
        return;
    }
    let a = Archive::load(&path).expect("goldens archive (bless with LATENTPAINT_BLESS=1)");
    let want = a.get(name).unwrap().to_array3().unwrap();
    assert_eq!(want.dim(), value.dim(), "{name}");
    let diff = (&want - value).iter().fold(0.0f32, |m, v| m.max(v.abs()));
    assert!(diff <= tol, "{name}: max abs diff {diff:e} > {tol:e}");
}

fn z_fix() -> latentpaint_core::generator::LatentCode {
    LatentLayout::from_generator(&bundle().generator).unwrap().sample(0x0F1C, 64)
}

#[test]
fn forward_and_high_layers_match_goldens() {
    let g = &bundle().generator;
    let z = z_fix();
    golden("img_fix", &g.forward(&z).unwrap().pixels, 1e-5);
    golden("zh_fix", &g.forward_high(&z).unwrap().values, 1e-5);
}

#[test]
fn seed_zero_scene_histogram() {
    let img = &make_synthetic_dataset(0, 1, 64).unwrap()[0];
    let h = class_histogram(img.segmentation.as_ref().unwrap());
    let v = Array3::from_shape_fn((1, 1, h.len()), |(_, _, k)| h[k] as f32);
    golden("scene0_histogram", &v, 0.0);
}

#[test]
fn adapted_render_matches_golden() {
    let b = bundle();
    let fx = &edit_fixtures(b, 1, &RefineConfig { steps: 50, ..Default::default() }).unwrap()[0];
    let cfg = AdaptationConfig { steps: 100, ..Default::default() };
    let (g, _) = optimize_adaptation(&b.generator, &fx.z_e, &fx.photo, &fx.mask, &cfg, None, |_, _| {}).unwrap();
    golden("adapted_fix", &g.render(&fx.z_e).unwrap().pixels, 1e-4);
}

#[test]
fn training_met_its_heldout_threshold() {
    let recipe: ToyRecipe = serde_json::from_slice(&std::fs::read(models().join("toy-v1.recipe.json")).unwrap()).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(models().join("toy-v1.report.json")).unwrap()).unwrap();
    let got = report["generator"]["heldout_psnr"].as_f64().unwrap();
    assert!(got >= recipe.generator.min_heldout_psnr, "{got}");
    assert_eq!(report["checkpoint_id"].as_str().unwrap(), bundle().checkpoint_id());
}

#[test]
fn encoder_alone_recovers_most_of_the_latent() {
    let b = bundle();
    let rs: Vec<f64> = generated_samples(&b.generator, 0x00E0_C0DE, 32)
        .unwrap()
        .iter()
        .map(|s| pearson(b.encoder.encode(&s.image).unwrap().as_slice(), s.latent.as_ref().unwrap().as_slice()))
        .collect();
    let min = rs.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = rs.iter().sum::<f64>() / rs.len() as f64;
    assert!(min >= 0.8 && mean >= 0.85, "min {min:.4} mean {mean:.4}");
}

#[test]
fn preview_fit_beats_the_base_generator() {
    let b = bundle();
    let cfg = AdaptationConfig::default();
    for x in make_synthetic_dataset(FIXTURE_SCENE_SEED ^ 0x16, 16, 64).unwrap() {
        let z = b.invert(&x, &RefineConfig { steps: 30, ..Default::default() }).unwrap().z;
        let base = psnr(&b.generator.forward(&z).unwrap(), &x, None);
        let w = fit_preview_generator(&b.generator, &z, &x, &cfg, None).unwrap();
        let fitted = psnr(&w.render(&z).unwrap(), &x, None);
        assert!(fitted > base, "{fitted:.2} <= {base:.2}");
    }
}

#[test]
fn noop_edit_adaptation_improves_with_budget() {
    let b = bundle();
    let none = Array2::zeros((64, 64));
    for x in make_synthetic_dataset(FIXTURE_SCENE_SEED ^ 0x40, 2, 64).unwrap() {
        let z = b.invert(&x, &RefineConfig { steps: 30, ..Default::default() }).unwrap().z;
        let at = |steps| {
            let cfg = AdaptationConfig { steps, ..Default::default() };
            let (g, _) = optimize_adaptation(&b.generator, &z, &x, &none, &cfg, None, |_, _| {}).unwrap();
            psnr(&g.render(&z).unwrap(), &x, None)
        };
        let (p0, p100, p1000): (f64, f64, f64) = (psnr(&b.generator.forward(&z).unwrap(), &x, None), at(100), at(1000));
        assert!(p100 >= p0 + 5.0 && p1000 > p100, "G {p0:.2}, 100 steps {p100:.2}, 1000 steps {p1000:.2}");
    }
}
