//! Adam descent over the unconstrained parameters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grad::{evaluate, EvalContext, LossBreakdown};
use super::params::{ParamGroup, Params, SceneState};
use super::{Observation, TrainConfig};
use crate::envlight::{EnvCubeMipmap, SplitSumLut};
use crate::gridmap::{AnchorGrid, GridConfig};
use crate::surfel::SurfelGaussian;
use crate::{Error, Result, Rgb};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-12;

/// Serialized parameter state and iteration counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub loss: f64,
    pub surfels: Vec<SurfelGaussian>,
    pub env_resolution: usize,
    pub env_scale: f64,
    pub env_latents: Vec<Rgb>,
    pub lp_angles: Vec<f64>,
}

impl Checkpoint {
    pub fn of(state: &SceneState, iteration: usize, loss: f64) -> Self {
        Self {
            iteration,
            loss,
            surfels: state.surfels.clone(),
            env_resolution: state.env.base_resolution,
            env_scale: state.env.scale,
            env_latents: state.env.latents.clone(),
            lp_angles: state.lp_angles.clone(),
        }
    }

    pub fn to_state(&self) -> Result<SceneState> {
        Ok(SceneState {
            surfels: self.surfels.clone(),
            env: EnvCubeMipmap::from_latents(self.env_resolution, self.env_latents.clone(), self.env_scale)?,
            lp_angles: self.lp_angles.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State with the lowest loss seen.
    pub state: SceneState,
    pub best_loss: f64,
    pub best_iteration: usize,
    /// Loss of the state at the start of each iteration.
    pub log: Vec<LossBreakdown>,
    /// GridMap in use at the end, if enabled.
    pub grid: Option<AnchorGrid>,
}

struct Adam {
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    fn new(p: &Params) -> Self {
        Self {
            m: Params::zeros_like(p),
            v: Params::zeros_like(p),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Params, grad: &Params, config: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for g in ParamGroup::ALL {
            let lr = config.learning_rates.of(g);
            if !config.trains(g) || lr == 0.0 {
                continue;
            }
            let gr = grad.group(g);
            let m = self.m.group_mut(g);
            for (mi, gi) in m.iter_mut().zip(gr) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            }
            let v = self.v.group_mut(g);
            for (vi, gi) in v.iter_mut().zip(gr) {
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            }
            let (m, v) = (self.m.group(g), self.v.group(g));
            for (k, p) in params.group_mut(g).iter_mut().enumerate() {
                *p -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

fn dump(dir: Option<&Path>, name: &str, ck: &Checkpoint) -> Result<Option<PathBuf>> {
    let Some(dir) = dir else { return Ok(None) };
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    ck.save(&path)?;
    Ok(Some(path))
}

/// Minimize the total loss from `initial`. Checkpoints (periodic and on
/// divergence) go to `checkpoint_dir` when given; `progress` sees every
/// iteration's loss.
pub fn train(
    initial: &SceneState,
    observations: &[Observation],
    lut: &SplitSumLut,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut progress: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainOutcome> {
    config.validate()?;
    if observations.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 observations, got {}",
            observations.len()
        )));
    }
    let mut state = initial.clone();
    let mut params = Params::encode(&state)?;
    state = params.decode(&state)?;
    let mut adam = Adam::new(&params);
    let mut grid = match config.gridmap.weighting() {
        Some(weighting) => Some(AnchorGrid::build(
            &state.surfels,
            &state.env,
            GridConfig {
                resolution: config.gridmap_resolution,
                refresh_interval: config.gridmap_refresh_interval,
                weighting,
            },
            0,
        )?),
        None => None,
    };
    let mut log = Vec::with_capacity(config.iterations);
    let mut best = (f64::INFINITY, 0usize, state.clone());
    let mut limit = f64::INFINITY;

    for it in 0..=config.iterations {
        if let Some(g) = grid.as_mut() {
            g.refresh_if_stale(&state.surfels, &state.env, it)?;
        }
        let ctx = EvalContext {
            weights: config.weights,
            mode: config.polarization_mode,
            lut,
            grid: grid.as_ref(),
        };
        let last = it == config.iterations;
        let eval = evaluate(&state, observations, &ctx, !last)?;
        let loss = eval.loss.total;
        if it == 0 {
            limit = config.divergence_factor * loss.max(1e-12);
        }
        if loss > limit {
            let path = dump(checkpoint_dir, "diverged.json", &Checkpoint::of(&state, it, loss))?;
            return Err(Error::Diverged {
                iteration: it,
                loss,
                limit,
                dump: path,
            });
        }
        if loss < best.0 {
            best = (loss, it, state.clone());
        }
        if last {
            break;
        }
        log.push(eval.loss);
        progress(it, &eval.loss);
        if config.checkpoint_interval > 0 && it > 0 && it % config.checkpoint_interval == 0 {
            dump(checkpoint_dir, &format!("checkpoint_{it:06}.json"), &Checkpoint::of(&state, it, loss))?;
        }
        let grad = eval.grad.expect("gradient requested");
        adam.step(&mut params, &grad, config);
        if let Some((g, i)) = params.first_non_finite() {
            return Err(Error::Numeric(format!(
                "iteration {it}: {} parameter {i} became non-finite",
                g.name()
            )));
        }
        state = params.decode(&state)?;
        // rotations are increments on the frames just updated
        params.group_mut(ParamGroup::Rotation).fill(0.0);
    }
    let (best_loss, best_iteration, state) = best;
    Ok(TrainOutcome {
        state,
        best_loss,
        best_iteration,
        log,
        grid,
    })
}
