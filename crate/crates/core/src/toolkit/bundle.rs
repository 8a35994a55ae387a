//! On-disk scene bundles: a `scene.json` manifest plus float image files.
//!
//! ```text
//! <dir>/scene.json        manifest (surfels, cameras, file references, metadata)
//! <dir>/env.psf           environment latents
//! <dir>/view_000.psf      observation planes (s0/s1/s2 or lp<k>, plus mask)
//! ```

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::image_file::{load_env, save_env, FloatImage};
use crate::optim::{LpCapture, Observation, PolarizationMode, SceneState, Target};
use crate::surfel::{Aabb, Camera, SurfelGaussian};
use crate::{Error, Result};

pub const MANIFEST: &str = "scene.json";
const ENV_FILE: &str = "env.psf";
const OBS_TAG: &str = "observation";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub units: String,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
}

/// Manifest stored as `scene.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub surfels: Vec<SurfelGaussian>,
    pub env_file: String,
    pub cameras: Vec<Camera>,
    pub observation_files: Vec<String>,
    /// Polarizer angles in radians; empty for full-Stokes bundles.
    pub lp_angles: Vec<f64>,
    pub mode: PolarizationMode,
    pub meta: BundleMeta,
}

/// A scene state with its cameras and (optional) observations.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub state: SceneState,
    pub cameras: Vec<Camera>,
    /// Either empty or one per camera.
    pub observations: Vec<Observation>,
    pub meta: BundleMeta,
}

fn bbox_of(surfels: &[SurfelGaussian]) -> Aabb {
    let mut b = Aabb::empty();
    for g in surfels {
        b.grow(&g.position);
    }
    b
}

fn observation_file(obs: &Observation) -> Result<FloatImage> {
    let mut img = FloatImage::new(obs.camera.width, obs.camera.height, OBS_TAG);
    match &obs.target {
        Target::Stokes { s0, s1, s2 } => {
            img.push_rgb("s0", s0)?;
            img.push_rgb("s1", s1)?;
            img.push_rgb("s2", s2)?;
        }
        Target::Lp(caps) => {
            for c in caps {
                img.push_rgb(&format!("lp{}", c.angle), &c.image)?;
            }
        }
    }
    img.push_plane("mask", &obs.mask)?;
    Ok(img)
}

fn observation_from_file(img: &FloatImage, camera: &Camera, lp_count: usize) -> Result<Observation> {
    if img.tag != OBS_TAG {
        return Err(Error::Format(format!("expected an observation file, found tag {:?}", img.tag)));
    }
    if (img.width, img.height) != (camera.width, camera.height) {
        return Err(Error::mismatch(camera.width * camera.height, img.width * img.height));
    }
    let mask: Vec<f64> = img.plane_by_label("mask")?.iter().map(|&v| v as f64).collect();
    let target = if img.labels.iter().any(|l| l == "s0.r") {
        Target::Stokes {
            s0: img.rgb_planes("s0")?,
            s1: img.rgb_planes("s1")?,
            s2: img.rgb_planes("s2")?,
        }
    } else {
        let mut caps = Vec::new();
        for angle in 0..lp_count {
            let prefix = format!("lp{angle}");
            if img.labels.iter().any(|l| *l == format!("{prefix}.r")) {
                caps.push(LpCapture {
                    angle,
                    image: img.rgb_planes(&prefix)?,
                });
            }
        }
        Target::Lp(caps)
    };
    let obs = Observation {
        camera: camera.clone(),
        target,
        mask,
    };
    obs.validate()?;
    Ok(obs)
}

impl SceneBundle {
    pub fn new(state: SceneState, cameras: Vec<Camera>, observations: Vec<Observation>) -> Self {
        let b = bbox_of(&state.surfels);
        Self {
            state,
            cameras,
            observations,
            meta: BundleMeta {
                units: "scene".into(),
                bbox_min: b.min.into(),
                bbox_max: b.max.into(),
            },
        }
    }

    pub fn mode(&self) -> PolarizationMode {
        match self.observations.first().map(|o| &o.target) {
            Some(Target::Lp(_)) => PolarizationMode::PartialLp,
            _ => PolarizationMode::FullStokes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.observations.is_empty() && self.observations.len() != self.cameras.len() {
            return Err(Error::Format(format!(
                "{} cameras but {} observations",
                self.cameras.len(),
                self.observations.len()
            )));
        }
        for c in &self.cameras {
            c.validate()?;
        }
        for o in &self.observations {
            o.validate()?;
            if let Target::Lp(caps) = &o.target {
                if let Some(c) = caps.iter().find(|c| c.angle >= self.state.lp_angles.len()) {
                    return Err(Error::Format(format!("capture references missing polarizer {}", c.angle)));
                }
            }
        }
        Ok(())
    }

    /// Write the manifest and all referenced files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        save_env(&self.state.env, &dir.join(ENV_FILE))?;
        let mut files = Vec::with_capacity(self.observations.len());
        for (i, obs) in self.observations.iter().enumerate() {
            let name = format!("view_{i:03}.psf");
            observation_file(obs)?.save(&dir.join(&name))?;
            files.push(name);
        }
        let manifest = SceneManifest {
            surfels: self.state.surfels.clone(),
            env_file: ENV_FILE.into(),
            cameras: self.cameras.clone(),
            observation_files: files,
            lp_angles: self.state.lp_angles.clone(),
            mode: self.mode(),
            meta: self.meta.clone(),
        };
        std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Load a bundle directory (or its `scene.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, manifest_path): (PathBuf, PathBuf) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
        let m: SceneManifest = serde_json::from_str(&text)?;
        if !m.observation_files.is_empty() && m.observation_files.len() != m.cameras.len() {
            return Err(Error::Format(format!(
                "{} cameras but {} observation files",
                m.cameras.len(),
                m.observation_files.len()
            )));
        }
        let env = load_env(&dir.join(&m.env_file))?;
        let observations = m
            .observation_files
            .iter()
            .zip(&m.cameras)
            .map(|(f, cam)| observation_from_file(&FloatImage::load(&dir.join(f))?, cam, m.lp_angles.len()))
            .collect::<Result<Vec<_>>>()?;
        let bundle = Self {
            state: SceneState {
                surfels: m.surfels,
                env,
                lp_angles: m.lp_angles,
            },
            cameras: m.cameras,
            observations,
            meta: m.meta,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn bbox(&self) -> Aabb {
        Aabb {
            min: Vector3::from(self.meta.bbox_min),
            max: Vector3::from(self.meta.bbox_max),
        }
    }
}
