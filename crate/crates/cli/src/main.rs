//! Command-line front end: synthesize scenes, render and decompose Stokes
//! images, relight, train and evaluate.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use polarsplat::envlight::{EnvCubeMipmap, SplitSumLut, LUT_SAMPLES};
use polarsplat::gridmap::{AnchorGrid, GridConfig};
use polarsplat::optim::{train, GridMode, Observation, TrainConfig};
use polarsplat::polardr::{render_state, RenderState, StokesImage};
use polarsplat::surfel::Camera;
use polarsplat::toolkit::metrics::{normal_errors, psnr, ssim_rgb};
use polarsplat::toolkit::synth::{synthesize, SynthConfig};
use polarsplat::toolkit::{load_env, save_stokes, FloatImage, SceneBundle};
use polarsplat::Error;

#[derive(Parser)]
#[command(name = "polarsplat", version, about = "Polarimetric Gaussian surfel rendering and inverse rendering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene bundle with rendered observations.
    Synth {
        /// TOML scene description; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render total Stokes images (and normal maps) of a bundle.
    Render(RenderArgs),
    /// Render total, diffuse and specular Stokes images of a bundle.
    Decompose(RenderArgs),
    /// Render a bundle under a different environment map.
    Relight {
        #[command(flatten)]
        render: RenderArgs,
        /// Environment file (float container tagged `envmap`).
        #[arg(long)]
        env: PathBuf,
    },
    /// Optimize a bundle's materials, lighting and geometry against its observations.
    Train {
        #[arg(long)]
        bundle: PathBuf,
        /// TOML training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_grid)]
        gridmap: Option<GridMode>,
        /// Use only the first N views (held-out views are excluded first).
        #[arg(long)]
        views: Option<usize>,
        /// Hold out every Nth view (0 keeps all).
        #[arg(long, default_value_t = 8)]
        holdout: usize,
        #[arg(long, value_enum, default_value_t = Init::Material)]
        init: Init,
        #[arg(long)]
        lut: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare rendered files against reference files of the same name.
    Eval {
        #[arg(long)]
        rendered: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// CSV report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Precompute and cache the split-sum table.
    Lut {
        #[arg(long, default_value_t = LUT_SAMPLES)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Render only this view.
    #[arg(long)]
    view: Option<usize>,
    /// Render only the first N views.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long, value_parser = parse_grid, default_value = "off")]
    gridmap: GridMode,
    /// Local cube map edge length when the GridMap is on.
    #[arg(long, default_value_t = polarsplat::gridmap::DEFAULT_RESOLUTION)]
    grid_resolution: usize,
    #[arg(long)]
    lut: Option<PathBuf>,
    /// Skip sRGB PNG previews.
    #[arg(long)]
    no_preview: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    /// Keep the bundle's parameters.
    Bundle,
    /// Keep geometry; reset materials to gray and the environment to constant.
    Material,
}

fn parse_grid(s: &str) -> std::result::Result<GridMode, String> {
    GridMode::parse(s).ok_or_else(|| format!("expected on, off, literal or inverse, got {s:?}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(err) if err.is_numeric() => 3,
        Some(Error::Config(_) | Error::Domain(_) | Error::Format(_) | Error::Json(_) | Error::DimensionMismatch { .. }) => 2,
        _ => 1,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { config, seed, views, out } => cmd_synth(config.as_deref(), seed, views, &out),
        Command::Render(args) => cmd_render(&args, false, None),
        Command::Decompose(args) => cmd_render(&args, true, None),
        Command::Relight { render, env } => {
            let env = load_env(&env).with_context(|| format!("loading {}", env.display()))?;
            cmd_render(&render, false, Some(env))
        }
        Command::Train {
            bundle,
            config,
            seed,
            gridmap,
            views,
            holdout,
            init,
            lut,
            out,
        } => cmd_train(TrainArgs {
            bundle: &bundle,
            config: config.as_deref(),
            seed,
            gridmap,
            views,
            holdout,
            init,
            lut: lut.as_deref(),
            out: &out,
        }),
        Command::Eval { rendered, reference, out } => cmd_eval(&rendered, &reference, out.as_deref()),
        Command::Lut { samples, out } => {
            let lut = SplitSumLut::precompute(samples)?;
            let mut w = BufWriter::new(File::create(&out)?);
            lut.write_to(&mut w)?;
            w.flush()?;
            println!("wrote {} ({}x{} nodes)", out.display(), lut.n_cos, lut.n_rough);
            Ok(())
        }
    }
}

fn load_lut(path: Option<&Path>) -> Result<Arc<SplitSumLut>> {
    match path {
        Some(p) => {
            let mut r = BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?);
            Ok(Arc::new(SplitSumLut::read_from(&mut r)?))
        }
        None => Ok(SplitSumLut::shared()),
    }
}

fn cmd_synth(config: Option<&Path>, seed: Option<u64>, views: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            SynthConfig::from_toml(&text)?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(v) = views {
        cfg.views = v;
    }
    let lut = SplitSumLut::shared();
    let scene = synthesize(&cfg, &lut)?;
    let bundle = SceneBundle::new(scene.state, scene.cameras, scene.observations);
    bundle.save(out)?;
    std::fs::write(out.join("synth.toml"), cfg.to_toml()?)?;
    println!(
        "wrote {} surfels, {} views to {}",
        bundle.state.surfels.len(),
        bundle.cameras.len(),
        out.display()
    );
    Ok(())
}

fn selected_views(n: usize, view: Option<usize>, views: Option<usize>) -> Result<Vec<usize>> {
    if let Some(v) = view {
        if v >= n {
            return Err(Error::Config(format!("view {v} out of range (bundle has {n})")).into());
        }
        return Ok(vec![v]);
    }
    Ok((0..views.unwrap_or(n).min(n)).collect())
}

fn build_grid(bundle: &SceneBundle, env: &EnvCubeMipmap, mode: GridMode, resolution: usize) -> Result<Option<AnchorGrid>> {
    let Some(weighting) = mode.weighting() else { return Ok(None) };
    let config = GridConfig {
        resolution,
        weighting,
        ..GridConfig::default()
    };
    Ok(Some(AnchorGrid::build(&bundle.state.surfels, env, config, 0)?))
}

fn cmd_render(args: &RenderArgs, decompose: bool, env_override: Option<EnvCubeMipmap>) -> Result<()> {
    let bundle = SceneBundle::load(&args.bundle)?;
    let lut = load_lut(args.lut.as_deref())?;
    let env = env_override.unwrap_or_else(|| bundle.state.env.clone());
    let grid = build_grid(&bundle, &env, args.gridmap, args.grid_resolution)?;
    std::fs::create_dir_all(&args.out)?;
    for v in selected_views(bundle.cameras.len(), args.view, args.views)? {
        let cam = &bundle.cameras[v];
        let rs = render_state(&bundle.state.surfels, cam, &env, Some(&lut), grid.as_ref())?;
        let err = rs.images.decomposition_error();
        if !(err <= 1e-9) {
            return Err(Error::Numeric(format!("view {v}: total differs from diffuse + specular by {err:e}")).into());
        }
        let mut outputs = vec![&rs.images.total];
        if decompose {
            outputs.push(&rs.images.diffuse);
            outputs.push(&rs.images.specular);
        }
        for img in outputs {
            let stem = format!("{}_{v:03}", img.component.name());
            save_stokes(img, &args.out.join(format!("{stem}.psf")))?;
            if !args.no_preview {
                write_preview(img, &args.out.join(format!("{stem}.png")))?;
            }
        }
        save_normals(&rs, cam, &args.out.join(format!("normal_{v:03}.psf")))?;
    }
    println!("rendered to {}", args.out.display());
    Ok(())
}

fn save_normals(rs: &RenderState, cam: &Camera, path: &Path) -> Result<()> {
    let gb = &rs.gbuffer;
    let mut img = FloatImage::new(cam.width, cam.height, "normal");
    for (k, axis) in ["n.x", "n.y", "n.z"].into_iter().enumerate() {
        let plane: Vec<f64> = gb.normal.iter().map(|n| n[k]).collect();
        img.push_plane(axis, &plane)?;
    }
    img.push_plane("mask", &gb.opacity)?;
    img.save(path)?;
    Ok(())
}

fn srgb(x: f64) -> u8 {
    let x = x.clamp(0.0, 1.0);
    let s = if x <= 0.003_130_8 {
        12.92 * x
    } else {
        1.055 * x.powf(1.0 / 2.4) - 0.055
    };
    (s * 255.0).round() as u8
}

fn write_preview(img: &StokesImage, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        *px = image::Rgb(img.s0[i].map(srgb));
    }
    buf.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

struct TrainArgs<'a> {
    bundle: &'a Path,
    config: Option<&'a Path>,
    seed: Option<u64>,
    gridmap: Option<GridMode>,
    views: Option<usize>,
    holdout: usize,
    init: Init,
    lut: Option<&'a Path>,
    out: &'a Path,
}

fn is_held_out(i: usize, holdout: usize) -> bool {
    holdout > 0 && i % holdout == holdout - 1
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let bundle = SceneBundle::load(a.bundle)?;
    let mut cfg = match a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(g) = a.gridmap {
        cfg.gridmap = g;
    }
    cfg.polarization_mode = bundle.mode();
    cfg.validate()?;
    if bundle.observations.is_empty() {
        bail!(Error::Config("bundle has no observations to train on".into()));
    }
    let train_obs: Vec<Observation> = bundle
        .observations
        .iter()
        .enumerate()
        .filter(|(i, _)| !is_held_out(*i, a.holdout))
        .map(|(_, o)| o.clone())
        .take(a.views.unwrap_or(usize::MAX))
        .collect();
    let mut init = bundle.state.clone();
    if let Init::Material = a.init {
        for g in &mut init.surfels {
            g.albedo = [0.5; 3];
            g.roughness = 0.5;
            g.ior_latent = 0.0;
        }
        init.env = EnvCubeMipmap::constant(init.env.base_resolution, [0.5; 3])?;
    }
    let lut = load_lut(a.lut)?;
    std::fs::create_dir_all(a.out)?;
    let ckdir = a.out.join("checkpoints");
    std::fs::create_dir_all(&ckdir)?;
    let mut csv = BufWriter::new(File::create(a.out.join("loss.csv"))?);
    writeln!(csv, "iteration,total,rgb,pol,lp,mask,depth,smooth")?;
    let mut io_err = None;
    let outcome = train(&init, &train_obs, &lut, &cfg, Some(&ckdir), |it, l| {
        let r = writeln!(
            csv,
            "{it},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            l.total, l.rgb, l.pol, l.lp, l.mask, l.depth, l.smooth
        );
        if let Err(e) = r {
            io_err.get_or_insert(e);
        }
        if it % 50 == 0 {
            eprintln!("iteration {it}: loss {:.6e}", l.total);
        }
    });
    csv.flush()?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let outcome = outcome?;
    polarsplat::optim::Checkpoint::of(&outcome.state, outcome.best_iteration, outcome.best_loss)
        .save(&ckdir.join("final.json"))?;
    let mut result = SceneBundle::new(outcome.state, bundle.cameras.clone(), bundle.observations.clone());
    result.meta = bundle.meta.clone();
    result.save(&a.out.join("bundle"))?;
    std::fs::write(a.out.join("train.toml"), cfg.to_toml()?)?;
    println!(
        "best loss {:.6e} at iteration {}; trained on {} views; bundle in {}",
        outcome.best_loss,
        outcome.best_iteration,
        train_obs.len(),
        a.out.join("bundle").display()
    );
    Ok(())
}

struct EvalRow {
    file: String,
    kind: &'static str,
    a: f64,
    b: f64,
}

fn cmd_eval(rendered: &Path, reference: &Path, out: Option<&Path>) -> Result<()> {
    let mut names: Vec<String> = std::fs::read_dir(reference)
        .with_context(|| format!("reading {}", reference.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".psf"))
        .collect();
    names.sort();
    let mut rows = Vec::new();
    for name in &names {
        let ref_path = reference.join(name);
        let ren_path = rendered.join(name);
        if !ren_path.exists() {
            bail!(Error::Format(format!("{} has no counterpart in {}", name, rendered.display())));
        }
        let r = FloatImage::load(&ref_path)?;
        let e = FloatImage::load(&ren_path)?;
        if (r.width, r.height, r.planes()) != (e.width, e.height, e.planes()) {
            bail!(Error::DimensionMismatch {
                expected: format!("{}x{}x{}", r.width, r.height, r.planes()),
                got: format!("{}x{}x{}", e.width, e.height, e.planes()),
            });
        }
        if r.tag == "normal" {
            let planes = |img: &FloatImage| -> Result<Vec<[f64; 3]>> {
                let (x, y, z) = (img.plane_by_label("n.x")?, img.plane_by_label("n.y")?, img.plane_by_label("n.z")?);
                Ok((0..x.len()).map(|i| [x[i] as f64, y[i] as f64, z[i] as f64]).collect())
            };
            let mask: Vec<f64> = r.plane_by_label("mask")?.iter().map(|&m| m as f64).collect();
            let (cd, mae) = normal_errors(&planes(&e)?, &planes(&r)?, &mask)?;
            rows.push(EvalRow { file: name.clone(), kind: "normal", a: cd, b: mae });
        } else {
            let (a, b) = (e.rgb_planes("s0")?, r.rgb_planes("s0")?);
            rows.push(EvalRow {
                file: name.clone(),
                kind: "s0",
                a: psnr(&a, &b)?,
                b: ssim_rgb(&a, &b, r.width, r.height)?,
            });
        }
    }
    let mut text = String::from("file,kind,psnr_or_cd,ssim_or_mae_deg\n");
    for row in &rows {
        text.push_str(&format!("{},{},{:.6},{:.6}\n", row.file, row.kind, row.a, row.b));
        match row.kind {
            "normal" => println!("{:<24} CD {:.5}  MAE {:.3} deg", row.file, row.a, row.b),
            _ => println!("{:<24} PSNR {:.3} dB  SSIM {:.5}", row.file, row.a, row.b),
        }
    }
    let mean = |kind: &str, f: fn(&EvalRow) -> f64| {
        let v: Vec<f64> = rows.iter().filter(|r| r.kind == kind).map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    if let (Some(p), Some(s)) = (mean("s0", |r| r.a), mean("s0", |r| r.b)) {
        println!("mean PSNR {p:.3} dB, mean SSIM {s:.5}");
    }
    if let (Some(c), Some(m)) = (mean("normal", |r| r.a), mean("normal", |r| r.b)) {
        println!("mean CD {c:.5}, mean MAE {m:.3} deg");
    }
    if let Some(path) = out {
        std::fs::write(path, text)?;
    }
    Ok(())
}
