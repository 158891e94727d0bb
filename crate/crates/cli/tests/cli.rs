use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latentpaint_core::editing::{EditMode, EditOp, RegionMask};
use latentpaint_core::image::{mask_to_png_bytes, Image};
use latentpaint_core::pipeline::{generated_samples, ModelBundle, ModelPaths};
use ndarray::Array2;

fn models() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentpaint"))
        .args(args)
        .env("LATENTPAINT_MODELS", models())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn bundle() -> ModelBundle {
    ModelBundle::load(&ModelPaths::named(models(), "toy-v1")).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn invert_edit_and_zero_step_adapt() {
    let b = bundle();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let photo = d.join("photo.png");
    generated_samples(&b.generator, 5, 1).unwrap()[0].image.save_png(&photo).unwrap();

    let out = ok(&["invert", "--image", s(&photo), "--checkpoint", "toy-v1", "--out", s(&d.join("z.arc")), "--steps", "30"]);
    let db: f64 = out.trim().strip_prefix("PSNR ").unwrap().strip_suffix(" dB").unwrap().parse().unwrap();
    assert!(db > 15.0, "{out}");

    let class = b.catalog.classes.iter().find(|c| !c.selected().is_empty()).unwrap().class;
    let mut region = Array2::zeros((4, 4));
    region[[1, 1]] = 1;
    let ops = vec![EditOp { id: 1, mode: EditMode::Erase, class, region: RegionMask(region), strength: 0.0, style_source: None }];
    fs::write(d.join("ops.json"), serde_json::to_string(&ops).unwrap()).unwrap();
    ok(&[
        "edit", "--latent", s(&d.join("z.arc")), "--ops", s(&d.join("ops.json")), "--out", s(&d.join("ze.arc")),
        "--render", s(&d.join("ge.png")),
    ]);

    let trace = d.join("trace.csv");
    ok(&[
        "adapt", "--latent", s(&d.join("ze.arc")), "--image", s(&photo), "--ops", s(&d.join("ops.json")),
        "--out", s(&d.join("adapted.png")), "--steps", "0", "--trace", s(&trace),
    ]);
    let a = Image::load_png(d.join("adapted.png")).unwrap();
    let g = Image::load_png(d.join("ge.png")).unwrap();
    assert!(a.max_abs_diff(&g) <= 1e-6);
    assert_eq!(fs::read_to_string(&trace).unwrap().lines().count(), 2);

    let out = ok(&[
        "adapt", "--latent", s(&d.join("ze.arc")), "--image", s(&photo), "--ops", s(&d.join("ops.json")),
        "--out", s(&d.join("adapted5.png")), "--steps", "5", "--perturbations", s(&d.join("delta.arc")),
    ]);
    assert!(out.contains("outside-mask PSNR"), "{out}");
    assert!(d.join("delta.arc").exists());
}

#[test]
fn eval_writes_metric_rows() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    for (k, name) in ["a", "b"].iter().enumerate() {
        let f = fx.join(name);
        fs::create_dir_all(&f).unwrap();
        let src = Image::new(ndarray::Array3::from_shape_fn((3, 16, 16), |(c, y, x)| ((c + y + x + k) as f32 / 40.0) - 0.5)).unwrap();
        let tgt = Image::filled(16, 16, -0.25);
        let mask = Array2::from_shape_fn((16, 16), |(y, x)| if (4..12).contains(&y) && (4..12).contains(&x) { 1.0 } else { 0.0 });
        src.save_png(f.join("source.png")).unwrap();
        tgt.save_png(f.join("target.png")).unwrap();
        fs::write(f.join("mask.png"), mask_to_png_bytes(&mask)).unwrap();
        src.save_png(f.join("ours.png")).unwrap();
    }
    let csv_path = dir.path().join("m.csv");
    ok(&["eval", "--fixtures", s(&fx), "--methods", "poisson,laplacian,ours", "--out", s(&csv_path)]);
    let text = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,fixture,psnr_out,seam_energy,wall_ms");
    assert_eq!(lines.len(), 1 + 3 * 2);
    assert!(lines.iter().any(|l| l.starts_with("ours,b,")));

    let stdout = ok(&["eval", "--fixtures", s(&fx), "--methods", "paste"]);
    assert_eq!(stdout.lines().count(), 3);
    let bad = run(&["eval", "--fixtures", s(&fx), "--methods", "nonexistent"]);
    assert!(!bad.status.success());
}

#[test]
fn dissect_reproduces_the_shipped_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.arc");
    let stdout = ok(&["dissect", "--checkpoint", "toy-v1", "--out", s(&out)]);
    assert!(stdout.contains("sky"), "{stdout}");
    let shipped = fs::read(models().join("toy-v1.catalog.arc")).unwrap();
    assert_eq!(fs::read(&out).unwrap(), shipped);
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let out = run(&["invert", "--image", "/nonexistent.png", "--checkpoint", "toy-v1", "--out", "/tmp/never.arc"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    let out = run(&["invert", "--image", "x.png", "--checkpoint", "no-such-model", "--out", "/tmp/never.arc"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-model"));
}

#[test]
fn tiny_training_run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = dir.path().join("r.json");
    let mut r = latentpaint_core::pipeline::ToyRecipe { name: "tiny".into(), train_scenes: 8, heldout_scenes: 2, ..Default::default() };
    r.generator.epochs = 1;
    r.generator.heldout_steps = 5;
    r.generator.min_heldout_psnr = 0.0;
    r.encoder.epochs = 1;
    r.encoder_samples = 8;
    r.encoder_heldout = 2;
    r.dissection.sample_size = 16;
    fs::write(&recipe, serde_json::to_string(&r).unwrap()).unwrap();
    for sub in ["a", "b"] {
        ok(&["train-toy", "--recipe", s(&recipe), "--out-dir", s(&dir.path().join(sub))]);
    }
    for f in ["tiny.gen.arc", "tiny.enc.arc", "tiny.catalog.arc"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    assert!(dir.path().join("a/tiny.report.json").exists());
}
