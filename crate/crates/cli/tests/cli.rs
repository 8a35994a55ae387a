use std::path::Path;
use std::process::{Command, Output};

use polarsplat::envlight::EnvCubeMipmap;
use polarsplat::toolkit::save_env;

const SMALL: &str = r#"
surfels = 60
views = 3
image_size = 16
env_resolution = 8
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polarsplat")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("synth.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let bundle = dir.join("scene");
    ok(&["synth", "--config", p(&cfg), "--seed", "3", "--out", p(&bundle)]);
    bundle
}

#[test]
fn synth_render_decompose_relight_eval() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path());
    assert!(bundle.join("scene.json").exists());
    assert!(bundle.join("view_002.psf").exists());

    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    ok(&["render", "--bundle", p(&bundle), "--out", p(&r1)]);
    ok(&["render", "--bundle", p(&bundle), "--out", p(&r2)]);
    for f in ["total_000.psf", "total_002.psf", "normal_001.psf", "total_001.png"] {
        assert_eq!(std::fs::read(r1.join(f)).unwrap(), std::fs::read(r2.join(f)).unwrap(), "{f}");
    }

    let dec = dir.path().join("dec");
    ok(&["decompose", "--bundle", p(&bundle), "--view", "1", "--out", p(&dec)]);
    for f in ["total_001.psf", "diffuse_001.psf", "specular_001.psf", "diffuse_001.png"] {
        assert!(dec.join(f).exists(), "{f}");
    }
    assert!(!dec.join("total_000.psf").exists());

    let same = dir.path().join("same");
    ok(&["relight", "--bundle", p(&bundle), "--env", p(&bundle.join("env.psf")), "--out", p(&same)]);
    assert_eq!(
        std::fs::read(r1.join("total_000.psf")).unwrap(),
        std::fs::read(same.join("total_000.psf")).unwrap()
    );

    let black = dir.path().join("black.psf");
    save_env(&EnvCubeMipmap::from_latents(8, vec![[0.0; 3]; 6 * 64], 0.0).unwrap(), &black).unwrap();
    let dark = dir.path().join("dark");
    ok(&["relight", "--bundle", p(&bundle), "--env", p(&black), "--gridmap", "on", "--grid-resolution", "8", "--out", p(&dark)]);
    let png = std::fs::read(dark.join("total_000.png")).unwrap();
    let img = image::load_from_memory(&png).unwrap().to_rgb8();
    assert!(img.pixels().all(|px| px.0 == [0, 0, 0]));

    let report = dir.path().join("report.csv");
    let out = ok(&["eval", "--rendered", p(&r1), "--reference", p(&r2), "--out", p(&report)]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("mean PSNR 99.000 dB"), "{text}");
    assert!(text.contains("mean CD 0.00000"), "{text}");
    assert!(std::fs::read_to_string(&report).unwrap().starts_with("file,kind"));
}

#[test]
fn train_writes_log_and_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path());
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, "iterations = 5\nfreeze_geometry = true\n").unwrap();
    let out = dir.path().join("trained");
    ok(&["train", "--bundle", p(&bundle), "--config", p(&cfg), "--holdout", "0", "--out", p(&out)]);
    let log = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(out.join("bundle/scene.json").exists());
    assert!(out.join("checkpoints/final.json").exists());

    let rendered = dir.path().join("rendered");
    ok(&["render", "--bundle", p(&out.join("bundle")), "--no-preview", "--out", p(&rendered)]);
    assert!(!rendered.join("total_000.png").exists());
}

#[test]
fn lut_cache_is_usable() {
    let dir = tempfile::tempdir().unwrap();
    let lut = dir.path().join("lut.bin");
    ok(&["lut", "--samples", "1024", "--out", p(&lut)]);
    let bundle = synth(dir.path());
    ok(&["render", "--bundle", p(&bundle), "--lut", p(&lut), "--views", "1", "--out", p(&dir.path().join("r"))]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "primitive = \"torus\"\n").unwrap();
    assert_eq!(run(&["synth", "--config", p(&bad), "--out", p(&dir.path().join("x"))]).status.code(), Some(2));

    let bundle = synth(dir.path());
    let out = run(&["render", "--bundle", p(&bundle), "--gridmap", "sometimes", "--out", p(&dir.path().join("y"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["render", "--bundle", p(&bundle), "--view", "9", "--out", p(&dir.path().join("y"))]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = dir.path().join("wild.toml");
    std::fs::write(
        &cfg,
        "iterations = 40\ndivergence_factor = 1.01\n[learning_rates]\nposition = 0.5\nopacity = 5.0\n",
    )
    .unwrap();
    let ck = dir.path().join("wild");
    let out = run(&["train", "--bundle", p(&bundle), "--config", p(&cfg), "--init", "bundle", "--out", p(&ck)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ck.join("checkpoints/diverged.json").exists());
}
