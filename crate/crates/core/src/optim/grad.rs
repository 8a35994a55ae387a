//! Total loss over a set of views and its gradient.
//!
//! Shading is differentiated per pixel in forward mode with respect to the
//! nine raw G-buffer blends it reads (albedo, roughness, IoR, normal and
//! opacity); everything before (alpha blending, ray-splat intersection)
//! and after (lighting lookups) is differentiated by hand in reverse.

use nalgebra::Vector3;
use rayon::prelude::*;

use super::loss::{
    loss_depth_normal_grad, loss_lp_grad, loss_mask_grad, loss_pol_grad, loss_rgb_grad, loss_smooth_grad,
};
use super::params::{ParamGroup, Params, SceneState};
use super::{ior_activation_grad, LossWeights, Observation, PolarizationMode, Target};
use crate::dual::{v3, Dual};
use crate::envlight::{EnvCubeMipmap, SplitSumLut};
use crate::gridmap::AnchorGrid;
use crate::polardr::{pixel_light, render_state, shade, view_dir, RenderState, ShadeInputs, SHADE_OPACITY};
use crate::surfel::{depth_to_normal, depth_to_normal_backward, Camera, SurfelGaussian, SurfelView, MIN_ROUGHNESS};
use crate::{Error, Result, Rgb};

/// Loss terms averaged over views.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub pol: f64,
    pub lp: f64,
    pub mask: f64,
    pub depth: f64,
    pub smooth: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, k: f64) {
        self.rgb += o.rgb * k;
        self.pol += o.pol * k;
        self.lp += o.lp * k;
        self.mask += o.mask * k;
        self.depth += o.depth * k;
        self.smooth += o.smooth * k;
        self.total += o.total * k;
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    /// Gradient in [`Params`] layout; rotation entries are derivatives at
    /// zero increment.
    pub grad: Option<Params>,
}

/// Fixed inputs of an evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub weights: LossWeights,
    pub mode: PolarizationMode,
    pub lut: &'a SplitSumLut,
    pub grid: Option<&'a AnchorGrid>,
}

/// Per-pixel gradients of the loss with respect to the raw G-buffer
/// blends and images.
struct ImageGrads {
    planes: [Vec<Rgb>; 3],
    opacity: Vec<f64>,
    depth: Vec<f64>,
    normal: Vec<[f64; 3]>,
    lp_angles: Vec<f64>,
}

fn view_loss(
    rs: &RenderState,
    obs: &Observation,
    state: &SceneState,
    ctx: &EvalContext,
) -> Result<(LossBreakdown, ImageGrads)> {
    let cam = &obs.camera;
    let (w, h) = (cam.width, cam.height);
    let gb = &rs.gbuffer;
    let total = &rs.images.total;
    let mut lb = LossBreakdown::default();
    let mut planes = [vec![[0.0; 3]; w * h], vec![[0.0; 3]; w * h], vec![[0.0; 3]; w * h]];
    let mut lp_angles = vec![0.0; state.lp_angles.len()];
    let wts = &ctx.weights;
    match (&obs.target, ctx.mode) {
        (Target::Stokes { s0, s1, s2 }, PolarizationMode::FullStokes) => {
            let (rgb, g0) = loss_rgb_grad(&total.s0, s0, w, h)?;
            let (pol, g1, g2) = loss_pol_grad(&total.s1, &total.s2, s1, s2)?;
            lb.rgb = rgb;
            lb.pol = pol;
            planes[0] = g0;
            planes[1] = g1.iter().map(|g| g.map(|v| v * wts.lambda1)).collect();
            planes[2] = g2.iter().map(|g| g.map(|v| v * wts.lambda1)).collect();
        }
        (Target::Lp(caps), PolarizationMode::PartialLp) => {
            let k = 1.0 / caps.len() as f64;
            for cap in caps {
                let theta = *state.lp_angles.get(cap.angle).ok_or_else(|| {
                    Error::Config(format!("capture refers to polarizer {} of {}", cap.angle, state.lp_angles.len()))
                })?;
                let (l, g) = loss_lp_grad(&total.s0, &total.s1, &total.s2, theta, &cap.image)?;
                lb.lp += l * k;
                lp_angles[cap.angle] += g.theta * k;
                for (p, gp) in [&g.s0, &g.s1, &g.s2].into_iter().enumerate() {
                    for (acc, v) in planes[p].iter_mut().zip(gp) {
                        for c in 0..3 {
                            acc[c] += v[c] * k;
                        }
                    }
                }
            }
        }
        _ => {
            return Err(Error::Config(
                "observation kind does not match the polarization mode".into(),
            ))
        }
    }
    let (mask_l, g_mask) = loss_mask_grad(&gb.opacity, &obs.mask)?;
    lb.mask = mask_l;
    let mut opacity: Vec<f64> = g_mask.iter().map(|v| v * wts.lambda2).collect();

    let surface: Vec<bool> = (0..w * h)
        .map(|i| obs.mask[i] >= 0.5 && gb.opacity[i] >= SHADE_OPACITY && gb.normal[i] != [0.0; 3])
        .collect();
    let dn = depth_to_normal(gb, cam);
    let depth_mask: Vec<bool> = (0..w * h).map(|i| surface[i] && dn[i] != [0.0; 3]).collect();
    let (depth_l, g_n_depth, g_dn) = loss_depth_normal_grad(&gb.normal, &dn, &depth_mask)?;
    lb.depth = depth_l;
    let (smooth_l, g_n_smooth) = loss_smooth_grad(&gb.normal, &obs.reference_s0(), &surface, w, h)?;
    lb.smooth = smooth_l;
    let normal: Vec<[f64; 3]> = (0..w * h)
        .map(|i| [0, 1, 2].map(|c| wts.lambda3 * g_n_depth[i][c] + wts.lambda4 * g_n_smooth[i][c]))
        .collect();
    let mut depth = vec![0.0; w * h];
    let g_dn: Vec<[f64; 3]> = g_dn.iter().map(|g| g.map(|v| v * wts.lambda3)).collect();
    depth_to_normal_backward(gb, cam, &g_dn, &mut depth, &mut opacity);

    lb.total = lb.rgb + wts.lambda1 * lb.pol + lb.lp + wts.lambda2 * lb.mask + wts.lambda3 * lb.depth + wts.lambda4 * lb.smooth;
    Ok((
        lb,
        ImageGrads {
            planes,
            opacity,
            depth,
            normal,
            lp_angles,
        },
    ))
}

/// Gradient of one surfel's parameters contributed by one pixel.
#[derive(Clone, Copy, Default)]
struct SurfelGrad {
    position: [f64; 3],
    rotation: [f64; 2],
    scale: [f64; 2],
    opacity: f64,
    albedo: [f64; 3],
    roughness: f64,
    ior: f64,
}

#[derive(Default)]
struct PixelOut {
    surfels: Vec<(u32, SurfelGrad)>,
    /// `(level, texel, grad)` for the prefiltered levels.
    levels: Vec<(usize, usize, Rgb)>,
    /// `(texel, grad)` for the irradiance cube.
    irradiance: Vec<(usize, Rgb)>,
}

type D9 = Dual<9>;

/// Raw blend gradient order: albedo(3), roughness, ior, normal(3), depth, opacity.
type RawGrad = [f64; 10];

#[allow(clippy::too_many_arguments)]
fn pixel_backward(
    i: usize,
    rs: &RenderState,
    g: &ImageGrads,
    cam: &Camera,
    env: &EnvCubeMipmap,
    ctx: &EvalContext,
    scene: &[SurfelGaussian],
    views: &[SurfelView],
    axes: ([f64; 3], [f64; 3]),
) -> PixelOut {
    let gb = &rs.gbuffer;
    let w = gb.width;
    let mut out = PixelOut::default();
    let o = gb.opacity[i];
    let mut raw: RawGrad = [0.0; 10];
    raw[8] = g.depth[i];
    raw[9] = g.opacity[i];
    let nb = gb.normal_blend[i];
    let g_n = g.normal[i];
    let shaded = o >= SHADE_OPACITY && gb.normal[i] != [0.0; 3];
    if shaded {
        let a = gb.albedo[i];
        let od = D9::var(o, 8);
        let nd = [D9::var(nb[0], 5), D9::var(nb[1], 6), D9::var(nb[2], 7)];
        let len = v3::norm(nd);
        let n = [nd[0] / len, nd[1] / len, nd[2] / len];
        let inp = ShadeInputs {
            albedo: [
                D9::var(a[0], 0) / od,
                D9::var(a[1], 1) / od,
                D9::var(a[2], 2) / od,
            ],
            roughness: D9::var(gb.roughness[i], 3) / od,
            ior: D9::var(gb.ior[i], 4) / od,
            normal: n,
        };
        // the normal losses see the unit normal
        let mut j = v3::dot_f(n, g_n);
        let light = pixel_light(env, ctx.grid, &rs.local[i]);
        let omega_o = view_dir(cam, i % w, i / w);
        if let Some((sh, adj)) = shade(&inp, omega_o, axes.0, axes.1, &light, ctx.lut) {
            for p in 0..3 {
                for c in 0..3 {
                    let gp = g.planes[p][i][c];
                    if gp != 0.0 {
                        j += (sh.diffuse[p][c] + sh.specular[p][c]) * gp;
                    }
                }
            }
            if light.specular_is_global() {
                let ge: Rgb = [0, 1, 2].map(|c| (0..3).map(|p| g.planes[p][i][c] * adj.spec_coef[p]).sum());
                if ge != [0.0; 3] {
                    for (level, texel, wt) in env.sample_footprint(adj.reflect, adj.roughness) {
                        out.levels.push((level, texel, ge.map(|v| v * wt)));
                    }
                }
            }
            if light.diffuse_is_global() {
                let ge: Rgb = [0, 1, 2]
                    .map(|c| (0..3).map(|p| g.planes[p][i][c] * adj.diff_pol[p]).sum::<f64>() * adj.diff_scale[c]);
                if ge != [0.0; 3] {
                    for (texel, wt) in env.irradiance.footprint(adj.normal) {
                        out.irradiance.push((texel, ge.map(|v| v * wt)));
                    }
                }
            }
        }
        for (k, r) in raw.iter_mut().take(8).enumerate() {
            *r += j.d[k];
        }
        raw[9] += j.d[8];
    } else if g_n != [0.0; 3] && o > 0.0 {
        let len = (nb[0] * nb[0] + nb[1] * nb[1] + nb[2] * nb[2]).sqrt();
        if len > 0.0 {
            let n = nb.map(|v| v / len);
            let dot = n[0] * g_n[0] + n[1] * g_n[1] + n[2] * g_n[2];
            for c in 0..3 {
                raw[5 + c] += (g_n[c] - n[c] * dot) / len;
            }
        }
    }
    if raw.iter().all(|v| *v == 0.0) {
        return out;
    }
    blend_backward(i, rs, &raw, cam, scene, views, &mut out);
    out
}

/// Reverse of the front-to-back blend of pixel `i`, then of each
/// fragment's ray-splat intersection.
fn blend_backward(
    i: usize,
    rs: &RenderState,
    raw: &RawGrad,
    cam: &Camera,
    scene: &[SurfelGaussian],
    views: &[SurfelView],
    out: &mut PixelOut,
) {
    let w = rs.gbuffer.width;
    let d = cam.ray_camera(i % w, i / w);
    let frags = rs.fragments.pixel(i);
    let mut suffix = 0.0;
    for f in frags.iter().rev() {
        let s = &scene[f.surfel as usize];
        let v = &views[f.surfel as usize];
        let n_w = s.normal();
        let attr = [
            s.albedo[0],
            s.albedo[1],
            s.albedo[2],
            s.roughness,
            s.ior(),
            n_w.x,
            n_w.y,
            n_w.z,
            f.z,
            1.0,
        ];
        let g_dot: f64 = attr.iter().zip(raw).map(|(a, g)| a * g).sum();
        let g_alpha = f.transmittance * (g_dot - suffix);
        suffix = g_dot * f.alpha + (1.0 - f.alpha) * suffix;
        let wt = f.transmittance * f.alpha;

        let mut g = SurfelGrad::default();
        for c in 0..3 {
            g.albedo[c] = wt * raw[c] * s.albedo[c] * (1.0 - s.albedo[c]);
        }
        let t = (s.roughness - MIN_ROUGHNESS) / (1.0 - MIN_ROUGHNESS);
        g.roughness = wt * raw[3] * (1.0 - MIN_ROUGHNESS) * t * (1.0 - t);
        g.ior = wt * raw[4] * ior_activation_grad(s.ior_latent);
        let g_nw = Vector3::new(raw[5], raw[6], raw[7]) * wt;
        let gz = wt * raw[8];

        g.opacity = g_alpha * f.weight * s.opacity * (1.0 - s.opacity);
        let g_weight = g_alpha * s.opacity;
        let gu = -g_weight * f.u * f.weight;
        let gv = -g_weight * f.v * f.weight;

        // intersection: z = n·p / n·d, q = d z − p, u = q·tu/su, v = q·tv/sv
        let q = d * f.z - v.p;
        let g_q = v.tu * (gu / v.su) + v.tv * (gv / v.sv);
        let mut g_tu_c = q * (gu / v.su);
        let mut g_tv_c = q * (gv / v.sv);
        let g_su = -gu * f.u / v.su;
        let g_sv = -gv * f.v / v.sv;
        let gz_tot = gz + g_q.dot(&d);
        let b = v.n.dot(&d);
        let g_p_c = -g_q + v.n * (gz_tot / b);
        let g_n_c = (v.p - d * f.z) * (gz_tot / b);
        g_tu_c += v.tv.cross(&g_n_c);
        g_tv_c += g_n_c.cross(&v.tu);

        let rt = cam.rotation.transpose();
        let g_pos = rt * g_p_c;
        let g_tu = rt * g_tu_c + s.t_v.cross(&g_nw);
        let g_tv = rt * g_tv_c + g_nw.cross(&s.t_u);
        g.position = [g_pos.x, g_pos.y, g_pos.z];
        // d t_u = −b n, d t_v = a n for the rotation increment (a, b)
        g.rotation = [g_tv.dot(&n_w), -g_tu.dot(&n_w)];
        g.scale = [g_su * v.su, g_sv * v.sv];
        out.surfels.push((f.surfel, g));
    }
}

/// Total loss averaged over `observations`, and its gradient when
/// `want_grad` is set.
pub fn evaluate(
    state: &SceneState,
    observations: &[Observation],
    ctx: &EvalContext,
    want_grad: bool,
) -> Result<Evaluation> {
    if observations.is_empty() {
        return Err(Error::Config("no observations".into()));
    }
    let scene = &state.surfels;
    let env = &state.env;
    let k = 1.0 / observations.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut grad = want_grad.then(|| Params::zeros(scene.len(), env.latents.len(), state.lp_angles.len()));
    let mut level_grads = env.zero_level_grads();
    let mut irr_grad = vec![[0.0; 3]; env.irradiance.texel_count()];

    for (v, obs) in observations.iter().enumerate() {
        obs.validate()?;
        let cam = &obs.camera;
        let rs = render_state(scene, cam, env, Some(ctx.lut), ctx.grid)?;
        if let Some(i) = (0..cam.width * cam.height).find(|&i| {
            let t = &rs.images.total;
            [t.s0[i], t.s1[i], t.s2[i]].iter().flatten().any(|x| !x.is_finite())
        }) {
            return Err(Error::Numeric(format!(
                "view {v}: non-finite radiance at pixel ({}, {})",
                i % cam.width,
                i / cam.width
            )));
        }
        let (lb, ig) = view_loss(&rs, obs, state, ctx)?;
        if !lb.total.is_finite() {
            return Err(Error::Numeric(format!("view {v}: non-finite loss {lb:?}")));
        }
        loss.add_scaled(&lb, k);
        let Some(grad) = grad.as_mut() else { continue };

        let views: Vec<SurfelView> = scene.iter().map(|g| SurfelView::new(cam, g)).collect();
        let (xa, ya) = (cam.x_axis(), cam.y_axis());
        let axes = ([xa.x, xa.y, xa.z], [ya.x, ya.y, ya.z]);
        let pixels: Vec<PixelOut> = (0..cam.width * cam.height)
            .into_par_iter()
            .map(|i| pixel_backward(i, &rs, &ig, cam, env, ctx, scene, &views, axes))
            .collect();
        for px in pixels {
            for (s, g) in px.surfels {
                let s = s as usize;
                add(&mut grad.group_mut(ParamGroup::Position)[3 * s..3 * s + 3], &g.position, k);
                add(&mut grad.group_mut(ParamGroup::Rotation)[2 * s..2 * s + 2], &g.rotation, k);
                add(&mut grad.group_mut(ParamGroup::Scale)[2 * s..2 * s + 2], &g.scale, k);
                grad.group_mut(ParamGroup::Opacity)[s] += g.opacity * k;
                add(&mut grad.group_mut(ParamGroup::Albedo)[3 * s..3 * s + 3], &g.albedo, k);
                grad.group_mut(ParamGroup::Roughness)[s] += g.roughness * k;
                grad.group_mut(ParamGroup::Ior)[s] += g.ior * k;
            }
            for (level, texel, g) in px.levels {
                add(&mut level_grads[level][texel], &g, k);
            }
            for (texel, g) in px.irradiance {
                add(&mut irr_grad[texel], &g, k);
            }
        }
        for (a, g) in grad.group_mut(ParamGroup::LpAngle).iter_mut().zip(&ig.lp_angles) {
            *a += g * k;
        }
    }
    if let Some(grad) = grad.as_mut() {
        let base = env.base_radiance_gradient(&level_grads, &irr_grad);
        let latent = env.latent_gradient(&base);
        *grad.group_mut(ParamGroup::Env) = latent.into_iter().flatten().collect();
        if let Some((g, i)) = grad.first_non_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {} parameter {i}", g.name())));
        }
    }
    Ok(Evaluation { loss, grad })
}

fn add(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * k;
    }
}
