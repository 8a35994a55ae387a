//! Unconstrained parameter vectors and their mapping to scene state.

use serde::{Deserialize, Serialize};

use super::{logit, roughness_activation, roughness_latent, sigmoid};
use crate::envlight::EnvCubeMipmap;
use crate::surfel::SurfelGaussian;
use crate::{Error, Result};

/// Keeps logits finite for values at the ends of `[0, 1]`.
const LOGIT_CLAMP: f64 = 1e-6;

/// Learnable parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Position,
    /// Two-parameter rotation of the tangent frame about `a·t_u + b·t_v`.
    Rotation,
    /// Log-scales.
    Scale,
    /// Opacity logits.
    Opacity,
    /// Albedo logits.
    Albedo,
    Roughness,
    /// IoR latent `μ`.
    Ior,
    /// Environment latents.
    Env,
    /// Linear polarizer angles in radians.
    LpAngle,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::Position,
        ParamGroup::Rotation,
        ParamGroup::Scale,
        ParamGroup::Opacity,
        ParamGroup::Albedo,
        ParamGroup::Roughness,
        ParamGroup::Ior,
        ParamGroup::Env,
        ParamGroup::LpAngle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Scale => "scale",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Albedo => "albedo",
            ParamGroup::Roughness => "roughness",
            ParamGroup::Ior => "ior",
            ParamGroup::Env => "env",
            ParamGroup::LpAngle => "lp_angle",
        }
    }

    /// Values per surfel (0 for non-surfel groups).
    pub fn per_surfel(self) -> usize {
        match self {
            ParamGroup::Position | ParamGroup::Albedo => 3,
            ParamGroup::Rotation | ParamGroup::Scale => 2,
            ParamGroup::Opacity | ParamGroup::Roughness | ParamGroup::Ior => 1,
            ParamGroup::Env | ParamGroup::LpAngle => 0,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Surfels, lighting and polarizer angles being optimized.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    pub surfels: Vec<SurfelGaussian>,
    pub env: EnvCubeMipmap,
    pub lp_angles: Vec<f64>,
}

/// Flat unconstrained values, one vector per [`ParamGroup`]. Also used
/// for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub groups: [Vec<f64>; 9],
}

impl Params {
    pub fn zeros_like(other: &Params) -> Self {
        Self {
            groups: other.groups.clone().map(|g| vec![0.0; g.len()]),
        }
    }

    /// Zeroed vectors sized for `n` surfels, `env_texels` texels and `lp`
    /// polarizer angles.
    pub fn zeros(n: usize, env_texels: usize, lp: usize) -> Self {
        let groups = ParamGroup::ALL.map(|g| match g {
            ParamGroup::Env => vec![0.0; env_texels * 3],
            ParamGroup::LpAngle => vec![0.0; lp],
            _ => vec![0.0; n * g.per_surfel()],
        });
        Self { groups }
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut Vec<f64> {
        &mut self.groups[g.index()]
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm(&self) -> f64 {
        self.groups.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// First non-finite entry as `(group, index)`.
    pub fn first_non_finite(&self) -> Option<(ParamGroup, usize)> {
        for g in ParamGroup::ALL {
            if let Some(i) = self.group(g).iter().position(|v| !v.is_finite()) {
                return Some((g, i));
            }
        }
        None
    }

    /// Latents of a scene state. Rotation parameters are zero: they are
    /// increments relative to the current frames.
    pub fn encode(state: &SceneState) -> Result<Self> {
        if state.env.latents.is_empty() {
            return Err(Error::Config("environment map has no latents to optimize".into()));
        }
        let n = state.surfels.len();
        let mut p = Self::zeros(n, state.env.latents.len(), state.lp_angles.len());
        for (i, g) in state.surfels.iter().enumerate() {
            p.group_mut(ParamGroup::Position)[3 * i..3 * i + 3].copy_from_slice(g.position.as_slice());
            p.group_mut(ParamGroup::Scale)[2 * i] = g.scale_u.ln();
            p.group_mut(ParamGroup::Scale)[2 * i + 1] = g.scale_v.ln();
            p.group_mut(ParamGroup::Opacity)[i] = logit(g.opacity.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP));
            for c in 0..3 {
                p.group_mut(ParamGroup::Albedo)[3 * i + c] = logit(g.albedo[c].clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP));
            }
            p.group_mut(ParamGroup::Roughness)[i] = roughness_latent(g.roughness);
            p.group_mut(ParamGroup::Ior)[i] = g.ior_latent;
        }
        *p.group_mut(ParamGroup::Env) = state.env.latents.iter().flatten().copied().collect();
        *p.group_mut(ParamGroup::LpAngle) = state.lp_angles.clone();
        Ok(p)
    }

    /// Scene state of these latents; `frames` supplies the tangent frames
    /// the rotation increments apply to.
    pub fn decode(&self, frames: &SceneState) -> Result<SceneState> {
        let n = frames.surfels.len();
        for g in ParamGroup::ALL {
            let expected = match g {
                ParamGroup::Env => frames.env.latents.len() * 3,
                ParamGroup::LpAngle => frames.lp_angles.len(),
                _ => n * g.per_surfel(),
            };
            if self.group(g).len() != expected {
                return Err(Error::mismatch(expected, self.group(g).len()));
            }
        }
        let mut surfels = frames.surfels.clone();
        for (i, g) in surfels.iter_mut().enumerate() {
            let pos = &self.group(ParamGroup::Position)[3 * i..3 * i + 3];
            g.position = nalgebra::Vector3::new(pos[0], pos[1], pos[2]);
            let rot = &self.group(ParamGroup::Rotation)[2 * i..2 * i + 2];
            g.rotate_frame(rot[0], rot[1]);
            g.scale_u = self.group(ParamGroup::Scale)[2 * i].exp();
            g.scale_v = self.group(ParamGroup::Scale)[2 * i + 1].exp();
            g.opacity = sigmoid(self.group(ParamGroup::Opacity)[i]);
            for c in 0..3 {
                g.albedo[c] = sigmoid(self.group(ParamGroup::Albedo)[3 * i + c]);
            }
            g.roughness = roughness_activation(self.group(ParamGroup::Roughness)[i]);
            g.ior_latent = self.group(ParamGroup::Ior)[i];
        }
        let latents = self
            .group(ParamGroup::Env)
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let env = EnvCubeMipmap::from_latents(frames.env.base_resolution, latents, frames.env.scale)?;
        Ok(SceneState {
            surfels,
            env,
            lp_angles: self.group(ParamGroup::LpAngle).to_vec(),
        })
    }
}
