#![allow(dead_code)]

use polarsplat::optim::{evaluate, EvalContext, ParamGroup, Params, SceneState};
use polarsplat::optim::Observation;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-2;
pub const ABS_TOL: f64 = 1e-6;

/// One compared gradient component.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub group: ParamGroup,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn ok(&self) -> bool {
        let diff = (self.analytic - self.numeric).abs();
        diff <= ABS_TOL || diff <= REL_TOL * self.analytic.abs().max(self.numeric.abs())
    }
}

fn loss_at(p: &Params, base: &SceneState, obs: &[Observation], ctx: &EvalContext) -> f64 {
    let s = p.decode(base).unwrap();
    evaluate(&s, obs, ctx, false).unwrap().loss.total
}

/// Central differences for every component of `groups`.
pub fn gradient_probes(state: &SceneState, obs: &[Observation], ctx: &EvalContext, groups: &[ParamGroup]) -> Vec<Probe> {
    let analytic = evaluate(state, obs, ctx, true).unwrap().grad.unwrap();
    let p0 = Params::encode(state).unwrap();
    // evaluate around the re-decoded state so encode/decode rounding cancels
    let base = p0.decode(state).unwrap();
    let analytic = if base == *state { analytic } else { evaluate(&base, obs, ctx, true).unwrap().grad.unwrap() };
    let mut out = Vec::new();
    for &g in groups {
        for i in 0..p0.group(g).len() {
            let mut plus = p0.clone();
            plus.group_mut(g)[i] += FD_STEP;
            let mut minus = p0.clone();
            minus.group_mut(g)[i] -= FD_STEP;
            let numeric = (loss_at(&plus, &base, obs, ctx) - loss_at(&minus, &base, obs, ctx)) / (2.0 * FD_STEP);
            out.push(Probe { group: g, index: i, analytic: analytic.group(g)[i], numeric });
        }
    }
    out
}
