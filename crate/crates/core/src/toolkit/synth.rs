//! Synthetic scenes: surfels sampled on analytic surfaces, procedural
//! environments, camera rings and rendered observations.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envlight::{env_activation_inverse, texel_dir, EnvCubeMipmap, FACES};
use crate::optim::{ior_latent, LpCapture, Observation, SceneState, Target};
use crate::polardr::{simulate_lp_capture, PolarImages};
use crate::envlight::SplitSumLut;
use crate::surfel::{Camera, SurfelGaussian};
use crate::{Error, Result, Rgb};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Sphere,
    /// Inside of a hemispherical bowl opening towards `+z`.
    Bowl,
    /// Floor `z = 0` meeting a wall `x = 0`.
    Corner,
}

impl Primitive {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Primitive::Sphere),
            "bowl" => Ok(Primitive::Bowl),
            "corner" => Ok(Primitive::Corner),
            _ => Err(Error::Config(format!("unknown primitive `{s}` (sphere | bowl | corner)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    /// Smooth random lobes over a dim base.
    Random,
    /// Bright upper hemisphere, dim lower one.
    Hemisphere,
    /// Uniform radiance.
    Constant,
}

/// Settings of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub primitive: Primitive,
    pub surfels: usize,
    pub radius: f64,
    /// Albedo at the equator; varies by ±`albedo_variation` with height.
    pub albedo: Rgb,
    pub albedo_variation: f64,
    pub ior: f64,
    pub roughness: f64,
    pub opacity: f64,
    pub env: EnvKind,
    pub env_resolution: usize,
    pub env_radiance: f64,
    pub views: usize,
    pub image_size: usize,
    /// Camera elevation above the equator in degrees.
    pub elevation_deg: f64,
    pub distance: f64,
    pub fov_deg: f64,
    /// Polarizer angles in degrees; empty for full Stokes observations.
    pub lp_angles_deg: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            primitive: Primitive::Sphere,
            surfels: 500,
            radius: 1.0,
            albedo: [0.6, 0.45, 0.3],
            albedo_variation: 0.15,
            ior: 1.5,
            roughness: 0.3,
            opacity: 0.99,
            env: EnvKind::Random,
            env_resolution: 32,
            env_radiance: 1.0,
            views: 8,
            image_size: 48,
            elevation_deg: 20.0,
            distance: 3.2,
            fov_deg: 40.0,
            lp_angles_deg: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.surfels < 4 {
            return Err(Error::Config("need at least 4 surfels".into()));
        }
        if self.views == 0 || self.image_size < 4 {
            return Err(Error::Config("need at least one view of at least 4×4 pixels".into()));
        }
        if !(self.radius > 0.0 && self.distance > self.radius) {
            return Err(Error::Config("cameras must sit outside the object".into()));
        }
        if !(1.3..=2.3).contains(&self.ior) || !(0.08..=1.0).contains(&self.roughness) {
            return Err(Error::Config("ior must lie in [1.3, 2.3], roughness in [0.08, 1]".into()));
        }
        if self.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) || !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Config("albedo and opacity must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `n` quasi-uniform unit directions (Fibonacci lattice).
pub fn fibonacci_directions(n: usize) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

fn albedo_at(cfg: &SynthConfig, height: f64) -> Rgb {
    let t = (height / cfg.radius).clamp(-1.0, 1.0) * cfg.albedo_variation;
    [
        (cfg.albedo[0] + t).clamp(0.02, 0.98),
        (cfg.albedo[1] - 0.5 * t).clamp(0.02, 0.98),
        (cfg.albedo[2] + 0.5 * t).clamp(0.02, 0.98),
    ]
}

fn material(cfg: &SynthConfig, mut g: SurfelGaussian) -> SurfelGaussian {
    g.albedo = albedo_at(cfg, g.position.z);
    g.opacity = cfg.opacity;
    g.roughness = cfg.roughness;
    g.ior_latent = ior_latent(cfg.ior);
    g
}

/// Surfels covering the primitive with outward (sphere) or inward-facing
/// (bowl, corner) normals.
pub fn sample_surfels(cfg: &SynthConfig) -> Vec<SurfelGaussian> {
    let r = cfg.radius;
    let n = cfg.surfels;
    match cfg.primitive {
        Primitive::Sphere => {
            let spacing = (4.0 * PI / n as f64).sqrt() * r;
            fibonacci_directions(n)
                .into_iter()
                .map(|d| material(cfg, SurfelGaussian::facing(d * r, d, 0.6 * spacing)))
                .collect()
        }
        Primitive::Bowl => {
            // lower hemisphere only, normals towards the center
            let dirs: Vec<_> = fibonacci_directions(2 * n).into_iter().filter(|d| d.z < 0.0).collect();
            let spacing = (2.0 * PI / dirs.len() as f64).sqrt() * r;
            dirs.into_iter()
                .map(|d| material(cfg, SurfelGaussian::facing(d * r, -d, 0.6 * spacing)))
                .collect()
        }
        Primitive::Corner => {
            let per = (n / 2).max(2);
            let side = (per as f64).sqrt().ceil() as usize;
            let step = 2.0 * r / side as f64;
            let mut out = Vec::with_capacity(2 * side * side);
            for i in 0..side {
                for j in 0..side {
                    let a = -r + (i as f64 + 0.5) * step;
                    let b = (j as f64 + 0.5) * step;
                    // floor at z = 0 spanning x ∈ [0, 2r]
                    out.push(material(
                        cfg,
                        SurfelGaussian::facing(Vector3::new(b, a, 0.0), Vector3::z(), 0.6 * step),
                    ));
                    // wall at x = 0 spanning z ∈ [0, 2r]
                    out.push(material(
                        cfg,
                        SurfelGaussian::facing(Vector3::new(0.0, a, b), Vector3::x(), 0.6 * step),
                    ));
                }
            }
            out
        }
    }
}

/// Radiance of the procedural environment in direction `d`.
fn env_radiance(kind: EnvKind, lobes: &[(Vector3<f64>, f64, Rgb)], level: f64, d: [f64; 3]) -> Rgb {
    match kind {
        EnvKind::Constant => [level; 3],
        EnvKind::Hemisphere => {
            if d[2] > 0.0 {
                [level; 3]
            } else {
                [0.02 * level; 3]
            }
        }
        EnvKind::Random => {
            let v = Vector3::from(d);
            let mut out = [0.15 * level; 3];
            for (axis, sharp, color) in lobes {
                let k = (sharp * (v.dot(axis) - 1.0)).exp();
                for c in 0..3 {
                    out[c] += level * color[c] * k;
                }
            }
            out
        }
    }
}

/// Environment with latents rounded to `f32`, so that saving and loading
/// it reproduces the same map.
pub fn make_env(kind: EnvKind, res: usize, level: f64, seed: u64) -> Result<EnvCubeMipmap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e11f);
    let lobes: Vec<(Vector3<f64>, f64, Rgb)> = (0..6)
        .map(|_| {
            let z: f64 = rng.gen_range(-0.3..1.0);
            let phi: f64 = rng.gen_range(0.0..2.0 * PI);
            let r = (1.0 - z * z).sqrt();
            let axis = Vector3::new(r * phi.cos(), r * phi.sin(), z);
            let sharp = rng.gen_range(2.0..12.0);
            let color = [rng.gen_range(0.2..1.2), rng.gen_range(0.2..1.2), rng.gen_range(0.2..1.2)];
            (axis, sharp, color)
        })
        .collect();
    let mut latents = Vec::with_capacity(FACES * res * res);
    for face in 0..FACES {
        for row in 0..res {
            for col in 0..res {
                let rad = env_radiance(kind, &lobes, level, texel_dir(res, face, col, row));
                latents.push(rad.map(|x| env_activation_inverse(x) as f32 as f64));
            }
        }
    }
    EnvCubeMipmap::from_latents(res, latents, 1.0)
}

/// `views` cameras evenly spaced on a ring around `target`, looking at it
/// with `+z` up.
pub fn camera_ring(
    views: usize,
    target: Vector3<f64>,
    distance: f64,
    elevation_deg: f64,
    fov_deg: f64,
    size: usize,
) -> Vec<Camera> {
    let el = elevation_deg.to_radians();
    (0..views)
        .map(|k| {
            let az = 2.0 * PI * k as f64 / views as f64;
            let eye = target + Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * distance;
            Camera::look_at(eye, target, Vector3::z(), fov_deg.to_radians(), size, size)
        })
        .collect()
}

/// Observation holding the rendered Stokes planes and opacity mask.
pub fn stokes_observation(cam: &Camera, images: &PolarImages, opacity: &[f64]) -> Observation {
    Observation {
        camera: cam.clone(),
        target: Target::Stokes {
            s0: images.total.s0.clone(),
            s1: images.total.s1.clone(),
            s2: images.total.s2.clone(),
        },
        mask: opacity.iter().map(|o| o.clamp(0.0, 1.0)).collect(),
    }
}

/// Observation holding one capture per polarizer angle.
pub fn lp_observation(cam: &Camera, images: &PolarImages, opacity: &[f64], angles: &[f64]) -> Observation {
    Observation {
        camera: cam.clone(),
        target: Target::Lp(
            angles
                .iter()
                .enumerate()
                .map(|(k, &theta)| LpCapture {
                    angle: k,
                    image: simulate_lp_capture(&images.total, theta),
                })
                .collect(),
        ),
        mask: opacity.iter().map(|o| o.clamp(0.0, 1.0)).collect(),
    }
}

/// Render observations of `state` from every camera. With polarizer
/// angles (radians) the observations are polarizer captures.
pub fn render_observations(
    state: &SceneState,
    cameras: &[Camera],
    lut: &SplitSumLut,
    lp_angles: &[f64],
) -> Result<Vec<Observation>> {
    cameras
        .iter()
        .map(|cam| {
            let rs = crate::polardr::render_state(&state.surfels, cam, &state.env, Some(lut), None)?;
            Ok(if lp_angles.is_empty() {
                stokes_observation(cam, &rs.images, &rs.gbuffer.opacity)
            } else {
                lp_observation(cam, &rs.images, &rs.gbuffer.opacity, lp_angles)
            })
        })
        .collect()
}

/// A generated scene with its cameras and observations.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub config: SynthConfig,
    pub state: SceneState,
    pub cameras: Vec<Camera>,
    pub observations: Vec<Observation>,
}

pub fn synthesize(cfg: &SynthConfig, lut: &SplitSumLut) -> Result<SynthScene> {
    cfg.validate()?;
    let surfels = sample_surfels(cfg);
    let env = make_env(cfg.env, cfg.env_resolution, cfg.env_radiance, cfg.seed)?;
    let target = match cfg.primitive {
        Primitive::Sphere => Vector3::zeros(),
        Primitive::Bowl => Vector3::new(0.0, 0.0, -0.5 * cfg.radius),
        Primitive::Corner => Vector3::new(0.5 * cfg.radius, 0.0, 0.5 * cfg.radius),
    };
    let cameras = camera_ring(
        cfg.views,
        target,
        cfg.distance * cfg.radius,
        cfg.elevation_deg,
        cfg.fov_deg,
        cfg.image_size,
    );
    let lp: Vec<f64> = cfg.lp_angles_deg.iter().map(|a| a.to_radians()).collect();
    let state = SceneState {
        surfels,
        env,
        lp_angles: lp.clone(),
    };
    let observations = render_observations(&state, &cameras, lut, &lp)?;
    Ok(SynthScene {
        config: cfg.clone(),
        state,
        cameras,
        observations,
    })
}

/// Small scene for gradient checks: three large, overlapping, tilted
/// surfels filling a 16×16 view from two cameras. The observations come
/// from a perturbed copy so the loss is nonzero.
pub fn gradient_check_scene(lut: &SplitSumLut) -> Result<(SceneState, Vec<Observation>)> {
    let mk = |p: [f64; 3], n: [f64; 3], s: (f64, f64), o: f64, a: Rgb, r: f64, mu: f64| {
        let mut g = SurfelGaussian::facing(Vector3::from(p), Vector3::from(n), s.0);
        g.scale_v = s.1;
        g.opacity = o;
        g.albedo = a;
        g.roughness = r;
        g.ior_latent = mu;
        g
    };
    let surfels = vec![
        mk([0.05, 0.02, 0.3], [0.25, 0.15, 1.0], (1.6, 1.3), 0.85, [0.6, 0.4, 0.3], 0.35, 0.2),
        mk([-0.1, 0.08, 0.0], [-0.2, 0.3, 1.0], (1.4, 1.7), 0.8, [0.3, 0.5, 0.7], 0.5, -0.4),
        mk([0.02, -0.1, -0.3], [0.1, -0.25, 1.0], (1.8, 1.5), 0.9, [0.5, 0.5, 0.2], 0.25, 0.6),
    ];
    let env = make_env(EnvKind::Random, 8, 1.0, 11)?;
    let cameras = vec![
        Camera::look_at(Vector3::new(0.3, -0.4, 3.0), Vector3::zeros(), Vector3::y(), 0.5, 16, 16),
        Camera::look_at(Vector3::new(-0.5, 0.2, 3.2), Vector3::zeros(), Vector3::y(), 0.5, 16, 16),
    ];
    let truth = SceneState {
        surfels: surfels.clone(),
        env: env.clone(),
        lp_angles: vec![0.0, PI / 2.0],
    };
    let mut perturbed = truth.clone();
    for (k, g) in perturbed.surfels.iter_mut().enumerate() {
        g.albedo = g.albedo.map(|a| (a + 0.1 * (k as f64 - 1.0) + 0.05).clamp(0.05, 0.95));
        g.roughness = (g.roughness + 0.1).min(0.9);
        g.ior_latent -= 0.3;
        g.position.z += 0.05;
    }
    let latents: Vec<Rgb> = env
        .latents
        .iter()
        .enumerate()
        .map(|(i, l)| l.map(|x| x + 0.2 * ((i % 7) as f64 / 7.0 - 0.5)))
        .collect();
    perturbed.env = EnvCubeMipmap::from_latents(8, latents, 1.0)?;
    let observations = render_observations(&perturbed, &cameras, lut, &[])?;
    Ok((truth, observations))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_normals_point_outward() {
        let cfg = SynthConfig::default();
        let s = sample_surfels(&cfg);
        assert_eq!(s.len(), 500);
        for g in &s {
            assert!((g.normal() - g.position.normalize()).norm() < 1e-6);
            assert!((g.position.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ring_cameras_are_equidistant() {
        let cams = camera_ring(8, Vector3::new(0.1, 0.2, 0.3), 3.0, 20.0, 40.0, 16);
        for c in &cams {
            assert!(((c.center() - Vector3::new(0.1, 0.2, 0.3)).norm() - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn env_is_deterministic_and_f32_exact() {
        let a = make_env(EnvKind::Random, 8, 1.0, 3).unwrap();
        let b = make_env(EnvKind::Random, 8, 1.0, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.latents.iter().flatten().all(|x| *x as f32 as f64 == *x));
        let h = make_env(EnvKind::Hemisphere, 8, 2.0, 0).unwrap();
        assert!(h.sample([0.0, 0.0, 1.0], 0.08)[0] > 1.9);
        assert!(h.sample([0.0, 0.0, -1.0], 0.08)[0] < 0.1);
    }

    #[test]
    fn bowl_and_corner_face_inward() {
        let cfg = SynthConfig {
            primitive: Primitive::Bowl,
            surfels: 200,
            ..Default::default()
        };
        for g in sample_surfels(&cfg) {
            assert!(g.position.z < 0.0);
            assert!(g.normal().dot(&g.position) < 0.0);
        }
        let cfg = SynthConfig {
            primitive: Primitive::Corner,
            surfels: 50,
            ..Default::default()
        };
        assert!(sample_surfels(&cfg).len() >= 50);
        assert!(Primitive::parse("torus").is_err());
    }
}
