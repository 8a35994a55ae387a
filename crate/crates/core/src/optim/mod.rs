//! Losses, parameter activations, gradients and the training loop.

pub mod grad;
pub mod loss;
pub mod params;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gridmap::{Weighting, DEFAULT_REFRESH};
use crate::surfel::{Camera, MIN_ROUGHNESS};
use crate::{Error, Result, Rgb};

pub use grad::{evaluate, EvalContext, Evaluation, LossBreakdown};
pub use loss::{ssim, ssim_grad};
pub use params::{ParamGroup, Params, SceneState};
pub use train::{train, Checkpoint, TrainOutcome};

/// Lower end of the IoR range.
pub const IOR_MIN: f64 = 1.3;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `η = 1.3 + σ(μ)`, in `(1.3, 2.3)`.
#[inline]
pub fn ior_activation(mu: f64) -> f64 {
    IOR_MIN + sigmoid(mu)
}

pub fn ior_activation_grad(mu: f64) -> f64 {
    let s = sigmoid(mu);
    s * (1.0 - s)
}

/// Inverse of [`ior_activation`]; `eta` is clamped into the open range.
pub fn ior_latent(eta: f64) -> f64 {
    logit((eta - IOR_MIN).clamp(1e-9, 1.0 - 1e-9))
}

/// `r = r_min + (1 − r_min)·σ(ℓ)`.
#[inline]
pub fn roughness_activation(l: f64) -> f64 {
    MIN_ROUGHNESS + (1.0 - MIN_ROUGHNESS) * sigmoid(l)
}

pub fn roughness_latent(r: f64) -> f64 {
    let t = (r - MIN_ROUGHNESS) / (1.0 - MIN_ROUGHNESS);
    logit(t.clamp(1e-6, 1.0 - 1e-6))
}

/// Weights of the auxiliary loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Polarization term.
    pub lambda1: f64,
    /// Mask term.
    pub lambda2: f64,
    /// Depth-normal consistency.
    pub lambda3: f64,
    /// Edge-aware normal smoothness.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 0.4,
            lambda3: 0.2,
            lambda4: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// What the observations record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolarizationMode {
    /// `s0, s1, s2` per view.
    #[default]
    FullStokes,
    /// Intensities behind linear polarizers.
    PartialLp,
}

/// Step sizes of each parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub albedo: f64,
    pub roughness: f64,
    pub ior: f64,
    pub env: f64,
    pub lp_angle: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1e-4,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            albedo: 2.5e-2,
            roughness: 2.5e-2,
            ior: 2.5e-2,
            env: 1e-2,
            lp_angle: 5e-3,
        }
    }
}

impl LearningRates {
    pub fn of(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Position => self.position,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Scale => self.scale,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Albedo => self.albedo,
            ParamGroup::Roughness => self.roughness,
            ParamGroup::Ior => self.ior,
            ParamGroup::Env => self.env,
            ParamGroup::LpAngle => self.lp_angle,
        }
    }
}

/// GridMap use during training and rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    #[default]
    Off,
    Literal,
    Inverse,
}

impl GridMode {
    pub fn weighting(self) -> Option<Weighting> {
        match self {
            GridMode::Off => None,
            GridMode::Literal => Some(Weighting::Literal),
            GridMode::Inverse => Some(Weighting::Inverse),
        }
    }

    /// Parses `on | off | literal | inverse` (`on` is literal weighting).
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "off" => Some(GridMode::Off),
            "on" | "literal" => Some(GridMode::Literal),
            "inverse" => Some(GridMode::Inverse),
            _ => None,
        }
    }
}

/// Training settings, read from TOML.
///
/// ```toml
/// iterations = 300
/// seed = 7
/// polarization_mode = "full_stokes"   # or "partial_lp"
/// lp_angles_learnable = false
/// freeze_geometry = true
/// gridmap = "off"                     # off | literal | inverse
/// gridmap_refresh_interval = 300
/// gridmap_resolution = 16
/// divergence_factor = 1000.0
/// checkpoint_interval = 0             # 0 disables periodic checkpoints
///
/// [weights]
/// lambda1 = 10.0
///
/// [learning_rates]
/// albedo = 0.025
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub learning_rates: LearningRates,
    pub polarization_mode: PolarizationMode,
    pub lp_angles_learnable: bool,
    /// Keep positions, rotations, scales and opacities fixed.
    pub freeze_geometry: bool,
    pub gridmap: GridMode,
    pub gridmap_refresh_interval: usize,
    pub gridmap_resolution: usize,
    /// Abort when the loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            seed: 0,
            weights: LossWeights::default(),
            learning_rates: LearningRates::default(),
            polarization_mode: PolarizationMode::FullStokes,
            lp_angles_learnable: false,
            freeze_geometry: false,
            gridmap: GridMode::Off,
            gridmap_refresh_interval: DEFAULT_REFRESH,
            gridmap_resolution: 16,
            divergence_factor: 1e3,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be > 0".into()));
        }
        if self.gridmap_refresh_interval == 0 {
            return Err(Error::Config("gridmap_refresh_interval must be >= 1".into()));
        }
        if self.gridmap_resolution < 8 || !self.gridmap_resolution.is_power_of_two() {
            return Err(Error::Config("gridmap_resolution must be a power of two >= 8".into()));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::Config("divergence_factor must exceed 1".into()));
        }
        self.weights.validate()?;
        for g in ParamGroup::ALL {
            let lr = self.learning_rates.of(g);
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate of {} must be finite and >= 0", g.name())));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Whether the group is updated under this configuration.
    pub fn trains(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Position | ParamGroup::Rotation | ParamGroup::Scale | ParamGroup::Opacity => {
                !self.freeze_geometry
            }
            ParamGroup::LpAngle => {
                self.polarization_mode == PolarizationMode::PartialLp && self.lp_angles_learnable
            }
            _ => true,
        }
    }
}

/// One image captured behind linear polarizer `angle` (an index into the
/// scene's LP angle list).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpCapture {
    pub angle: usize,
    pub image: Vec<Rgb>,
}

/// Supervision of one view.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Stokes { s0: Vec<Rgb>, s1: Vec<Rgb>, s2: Vec<Rgb> },
    Lp(Vec<LpCapture>),
}

/// A camera with its ground truth images and object mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub camera: Camera,
    pub target: Target,
    pub mask: Vec<f64>,
}

impl Observation {
    pub fn validate(&self) -> Result<()> {
        let n = self.camera.width * self.camera.height;
        let check = |len: usize| if len == n { Ok(()) } else { Err(Error::mismatch(n, len)) };
        check(self.mask.len())?;
        if self.mask.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Domain("mask values must lie in [0, 1]".into()));
        }
        match &self.target {
            Target::Stokes { s0, s1, s2 } => {
                check(s0.len())?;
                check(s1.len())?;
                check(s2.len())?;
            }
            Target::Lp(caps) => {
                if caps.is_empty() {
                    return Err(Error::Config("polarizer observation without captures".into()));
                }
                for c in caps {
                    check(c.image.len())?;
                }
            }
        }
        Ok(())
    }

    /// Unpolarized intensity estimate used for edge weights: `ŝ0`, or the
    /// mean capture times two.
    pub fn reference_s0(&self) -> Vec<Rgb> {
        match &self.target {
            Target::Stokes { s0, .. } => s0.clone(),
            Target::Lp(caps) => {
                let k = 2.0 / caps.len() as f64;
                let mut out = vec![[0.0; 3]; caps[0].image.len()];
                for c in caps {
                    for (o, v) in out.iter_mut().zip(&c.image) {
                        for ch in 0..3 {
                            o[ch] += v[ch] * k;
                        }
                    }
                }
                out
            }
        }
    }
}
