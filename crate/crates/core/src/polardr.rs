//! Polarimetric deferred shading: G-buffer plus lighting to diffuse and
//! specular Stokes images.
//!
//! The azimuth of the projected normal is `φ = atan2(n·x_cam, n·y_cam)`,
//! so a normal projecting onto `+y_cam` has `φ = 0`. Specular light is
//! `[L, β_s cos 2φ L, -β_s sin 2φ L, 0]`, diffuse the same with `β_d ≤ 0`.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::{v3, Real};
use crate::envlight::{EnvCubeMipmap, SplitSumLut};
use crate::gridmap::AnchorGrid;
use crate::polcore::{beta_diff_of, beta_spec_of, fresnel_terms, mueller_lp, SpectralStokes};
use crate::surfel::{rasterize_with_fragments, Camera, FragmentList, GBuffer, SurfelGaussian, MIN_ROUGHNESS};
use crate::{Error, Result, Rgb};

/// Pixels with blended opacity at or above this are shaded.
pub const SHADE_OPACITY: f64 = 0.5;

/// Per-pixel viewing geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadingGeometry {
    pub n: [f64; 3],
    pub omega_o: [f64; 3],
    pub theta_n: f64,
    pub phi_n: f64,
}

impl ShadingGeometry {
    pub fn cos_theta(&self) -> f64 {
        v3::dot(self.n, self.omega_o)
    }
}

/// `(cos 2φ, sin 2φ)` of the normal projected on the image plane, without
/// trigonometric calls. A normal along the view axis gives `(1, 0)`.
#[inline]
pub fn azimuth_terms<T: Real>(n: [T; 3], x_cam: [f64; 3], y_cam: [f64; 3]) -> (T, T) {
    let px = v3::dot_f(n, x_cam);
    let py = v3::dot_f(n, y_cam);
    let rho2 = px * px + py * py;
    if rho2.val() < 1e-24 {
        return (T::cst(1.0), T::cst(0.0));
    }
    ((py * py - px * px) / rho2, px * py * 2.0 / rho2)
}

/// Geometry at pixel `(x, y)` for unit normal `n`; `None` when back-facing.
pub fn shading_geometry(n: [f64; 3], cam: &Camera, pixel: (usize, usize)) -> Option<ShadingGeometry> {
    let omega_o = view_dir(cam, pixel.0, pixel.1);
    let c = v3::dot(n, omega_o);
    if !(c > 0.0) {
        return None;
    }
    let (x_cam, y_cam) = (cam.x_axis(), cam.y_axis());
    let px = n[0] * x_cam.x + n[1] * x_cam.y + n[2] * x_cam.z;
    let py = n[0] * y_cam.x + n[1] * y_cam.y + n[2] * y_cam.z;
    Some(ShadingGeometry {
        n,
        omega_o,
        theta_n: c.min(1.0).acos(),
        phi_n: px.atan2(py),
    })
}

/// Unit direction from the surface toward the camera along pixel `(x, y)`.
pub fn view_dir(cam: &Camera, x: usize, y: usize) -> [f64; 3] {
    let d = -cam.ray_world(x, y).normalize();
    [d.x, d.y, d.z]
}

#[inline]
fn f0_of<T: Real>(eta: T) -> T {
    let k = (-eta + 1.0) / (eta + 1.0);
    k * k
}

/// `(F0 τ0 + τ1) · E(reflect(ω_o, n), r)`.
pub fn specular_radiance(geom: &ShadingGeometry, roughness: f64, eta: f64, env: &EnvCubeMipmap, lut: &SplitSumLut) -> Rgb {
    let c = geom.cos_theta();
    let r = roughness.clamp(MIN_ROUGHNESS, 1.0);
    let (t0, t1) = lut.lookup(c, r);
    let k = f0_of(eta) * t0 + t1;
    let refl = reflect(geom.n, geom.omega_o, c);
    env.sample(refl, r).map(|e| e * k)
}

/// `(1 − F) · albedo/π · irradiance(n)` with Schlick `F`.
pub fn diffuse_radiance(geom: &ShadingGeometry, albedo: Rgb, eta: f64, env: &EnvCubeMipmap) -> Rgb {
    let f = schlick(f0_of(eta), geom.cos_theta());
    let irr = env.irradiance(geom.n);
    [0, 1, 2].map(|c| (1.0 - f) * albedo[c] / std::f64::consts::PI * irr[c])
}

#[inline]
fn schlick<T: Real>(f0: T, cos: T) -> T {
    f0 + (-f0 + 1.0) * (-cos + 1.0).powi(5)
}

#[inline]
fn reflect<T: Real>(n: [T; 3], omega_o: [f64; 3], c: T) -> [T; 3] {
    [
        n[0] * c * 2.0 - omega_o[0],
        n[1] * c * 2.0 - omega_o[1],
        n[2] * c * 2.0 - omega_o[2],
    ]
}

fn polarize(l: Rgb, beta: f64, geom: &ShadingGeometry) -> SpectralStokes {
    let (sin2, cos2) = (2.0 * geom.phi_n).sin_cos();
    SpectralStokes::linear(l, beta, cos2, sin2)
}

/// Specular Stokes vector `[L, β_s cos 2φ L, −β_s sin 2φ L, 0]`.
pub fn polarize_specular(ls: Rgb, geom: &ShadingGeometry, eta: f64) -> SpectralStokes {
    let f = fresnel_terms(eta, geom.cos_theta().min(1.0));
    polarize(ls, beta_spec_of(f.r_perp, f.r_par), geom)
}

/// Diffuse Stokes vector with `β_d ≤ 0`.
pub fn polarize_diffuse(ld: Rgb, geom: &ShadingGeometry, eta: f64) -> SpectralStokes {
    let f = fresnel_terms(eta, geom.cos_theta().min(1.0));
    polarize(ld, beta_diff_of(f.t_perp, f.t_par), geom)
}

/// Which part of the reflected light an image holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Total,
    Diffuse,
    Specular,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Total => "total",
            Component::Diffuse => "diffuse",
            Component::Specular => "specular",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "total" => Some(Component::Total),
            "diffuse" => Some(Component::Diffuse),
            "specular" => Some(Component::Specular),
            _ => None,
        }
    }
}

/// RGB Stokes planes `s0, s1, s2` of one image (`s3` is always zero).
#[derive(Debug, Clone, PartialEq)]
pub struct StokesImage {
    pub width: usize,
    pub height: usize,
    pub component: Component,
    pub s0: Vec<Rgb>,
    pub s1: Vec<Rgb>,
    pub s2: Vec<Rgb>,
}

impl StokesImage {
    pub fn zeros(width: usize, height: usize, component: Component) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            component,
            s0: vec![[0.0; 3]; n],
            s1: vec![[0.0; 3]; n],
            s2: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixel(&self, i: usize) -> SpectralStokes {
        SpectralStokes {
            s0: self.s0[i],
            s1: self.s1[i],
            s2: self.s2[i],
            s3: [0.0; 3],
        }
    }

    pub fn set_pixel(&mut self, i: usize, s: &SpectralStokes) {
        self.s0[i] = s.s0;
        self.s1[i] = s.s1;
        self.s2[i] = s.s2;
    }

    /// Pixelwise sum tagged as `component`.
    pub fn sum(&self, o: &StokesImage, component: Component) -> Result<StokesImage> {
        if self.len() != o.len() {
            return Err(Error::mismatch(self.len(), o.len()));
        }
        let add = |a: &[Rgb], b: &[Rgb]| -> Vec<Rgb> {
            a.iter()
                .zip(b)
                .map(|(x, y)| [x[0] + y[0], x[1] + y[1], x[2] + y[2]])
                .collect()
        };
        Ok(StokesImage {
            width: self.width,
            height: self.height,
            component,
            s0: add(&self.s0, &o.s0),
            s1: add(&self.s1, &o.s1),
            s2: add(&self.s2, &o.s2),
        })
    }
}

/// The three images produced by one render.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarImages {
    pub total: StokesImage,
    pub diffuse: StokesImage,
    pub specular: StokesImage,
}

impl PolarImages {
    /// Largest `|total − (diffuse + specular)|` over all planes.
    pub fn decomposition_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let planes = [
            (&self.total.s0, &self.diffuse.s0, &self.specular.s0),
            (&self.total.s1, &self.diffuse.s1, &self.specular.s1),
            (&self.total.s2, &self.diffuse.s2, &self.specular.s2),
        ];
        for (t, d, s) in planes {
            for ((a, b), c) in t.iter().zip(d).zip(s) {
                for k in 0..3 {
                    worst = worst.max((a[k] - b[k] - c[k]).abs());
                }
            }
        }
        worst
    }
}

/// Opacity-normalized shading inputs of one pixel.
#[derive(Debug, Clone, Copy)]
pub struct ShadeInputs<T> {
    pub albedo: [T; 3],
    pub roughness: T,
    pub ior: T,
    /// Unit normal.
    pub normal: [T; 3],
}

/// Shaded Stokes planes `[s0, s1, s2]` of each component, per channel.
#[derive(Debug, Clone, Copy)]
pub struct ShadeOutput<T> {
    pub diffuse: [[T; 3]; 3],
    pub specular: [[T; 3]; 3],
}

/// Light feeding one pixel: the global map, or GridMap blends.
#[derive(Debug, Clone)]
pub enum PixelLight<'a> {
    Global(&'a EnvCubeMipmap),
    Local {
        env: &'a EnvCubeMipmap,
        grid: &'a AnchorGrid,
        /// Normalized anchor weights at the pixel's surface point.
        weights: Vec<f64>,
        /// Whether the mirror direction is blocked by the object.
        occluded: bool,
    },
}

impl PixelLight<'_> {
    #[inline]
    pub fn specular<T: Real>(&self, dir: [T; 3], r: T) -> [T; 3] {
        match self {
            PixelLight::Global(env) => env.sample(dir, r),
            PixelLight::Local {
                env,
                grid,
                weights,
                occluded,
            } => {
                if *occluded {
                    grid.blend(weights, |m| m.sample(dir, r))
                } else {
                    env.sample(dir, r)
                }
            }
        }
    }

    #[inline]
    pub fn irradiance<T: Real>(&self, n: [T; 3]) -> [T; 3] {
        match self {
            PixelLight::Global(env) => env.irradiance(n),
            PixelLight::Local { grid, weights, .. } => grid.blend(weights, |m| m.irradiance(n)),
        }
    }

    /// Whether the specular term reads the global map (and so carries
    /// environment gradients).
    pub fn specular_is_global(&self) -> bool {
        !matches!(self, PixelLight::Local { occluded: true, .. })
    }

    pub fn diffuse_is_global(&self) -> bool {
        matches!(self, PixelLight::Global(_))
    }
}

/// Values needed to push gradients into the lighting.
#[derive(Debug, Clone, Copy)]
pub struct LightAdjoint {
    pub reflect: [f64; 3],
    pub roughness: f64,
    pub normal: [f64; 3],
    /// `∂(s0, s1, s2)_spec / ∂E_spec` for each channel.
    pub spec_coef: [f64; 3],
    /// `∂(s0, s1, s2)_diff / ∂E_irr[c]` is `diff_scale[c] · diff_pol`.
    pub diff_scale: Rgb,
    pub diff_pol: [f64; 3],
}

/// Shade one pixel. Returns `None` when back-facing.
#[inline]
pub fn shade<T: Real>(
    inp: &ShadeInputs<T>,
    omega_o: [f64; 3],
    x_cam: [f64; 3],
    y_cam: [f64; 3],
    light: &PixelLight<'_>,
    lut: &SplitSumLut,
) -> Option<(ShadeOutput<T>, LightAdjoint)> {
    let n = inp.normal;
    let c = v3::dot_f(n, omega_o);
    if !(c.val() > 0.0) {
        return None;
    }
    let c = c.clamp_val(0.0, 1.0);
    let r = inp.roughness.clamp_val(MIN_ROUGHNESS, 1.0);
    let eta = inp.ior;
    let f0 = f0_of(eta);
    let (t0, t1) = lut.lookup(c, r);
    let k_spec = f0 * t0 + t1;
    let refl = reflect(n, omega_o, c);
    let e_spec = light.specular(refl, r);
    let fres = fresnel_terms(eta, c);
    let b_s = beta_spec_of(fres.r_perp, fres.r_par);
    let b_d = beta_diff_of(fres.t_perp, fres.t_par);
    let (c2, s2) = azimuth_terms(n, x_cam, y_cam);
    let one_minus_f = -schlick(f0, c) + 1.0;
    let irr = light.irradiance(n);
    let mut out = ShadeOutput {
        diffuse: [[T::cst(0.0); 3]; 3],
        specular: [[T::cst(0.0); 3]; 3],
    };
    let spec_pol = [T::cst(1.0), b_s * c2, -(b_s * s2)];
    let diff_pol = [T::cst(1.0), b_d * c2, -(b_d * s2)];
    let mut diff_scale = [0.0; 3];
    for ch in 0..3 {
        let ls = k_spec * e_spec[ch];
        let kd = one_minus_f * inp.albedo[ch] * std::f64::consts::FRAC_1_PI;
        diff_scale[ch] = kd.val();
        let ld = kd * irr[ch];
        for p in 0..3 {
            out.specular[p][ch] = spec_pol[p] * ls;
            out.diffuse[p][ch] = diff_pol[p] * ld;
        }
    }
    let adj = LightAdjoint {
        reflect: v3::val(refl),
        roughness: r.val(),
        normal: v3::val(n),
        spec_coef: spec_pol.map(|p| p.val() * k_spec.val()),
        diff_scale,
        diff_pol: diff_pol.map(|p| p.val()),
    };
    Some((out, adj))
}

/// Shading inputs of G-buffer pixel `i`, normalized by its opacity.
pub fn pixel_inputs(gb: &GBuffer, i: usize) -> Option<ShadeInputs<f64>> {
    let o = gb.opacity[i];
    if o < SHADE_OPACITY || gb.normal[i] == [0.0; 3] {
        return None;
    }
    let a = gb.albedo[i];
    Some(ShadeInputs {
        albedo: [a[0] / o, a[1] / o, a[2] / o],
        roughness: gb.roughness[i] / o,
        ior: gb.ior[i] / o,
        normal: gb.normal[i],
    })
}

/// Surface point of pixel `i` (opacity-normalized world position).
pub fn surface_point(gb: &GBuffer, i: usize) -> Vector3<f64> {
    let o = gb.opacity[i];
    let p = gb.world_position[i];
    if o > 0.0 {
        Vector3::new(p[0] / o, p[1] / o, p[2] / o)
    } else {
        Vector3::zeros()
    }
}

/// Everything a render produced, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RenderState {
    pub images: PolarImages,
    pub gbuffer: GBuffer,
    pub fragments: FragmentList,
    /// Per pixel: anchor weights and occlusion flag when GridMap was used.
    pub local: Vec<Option<(Vec<f64>, bool)>>,
}

/// Lighting of pixel `i` given the optional GridMap.
pub(crate) fn pixel_light<'a>(
    env: &'a EnvCubeMipmap,
    grid: Option<&'a AnchorGrid>,
    local: &Option<(Vec<f64>, bool)>,
) -> PixelLight<'a> {
    match (grid, local) {
        (Some(grid), Some((weights, occluded))) => PixelLight::Local {
            env,
            grid,
            weights: weights.clone(),
            occluded: *occluded,
        },
        _ => PixelLight::Global(env),
    }
}

/// Render and keep intermediate state.
pub fn render_state(
    scene: &[SurfelGaussian],
    cam: &Camera,
    env: &EnvCubeMipmap,
    lut: Option<&SplitSumLut>,
    grid: Option<&AnchorGrid>,
) -> Result<RenderState> {
    let lut = lut.ok_or_else(|| Error::Config("split-sum table not built".into()))?;
    let (gb, fragments) = rasterize_with_fragments(scene, cam);
    let (w, h) = (cam.width, cam.height);
    let x_cam = cam.x_axis();
    let y_cam = cam.y_axis();
    let (x_cam, y_cam) = ([x_cam.x, x_cam.y, x_cam.z], [y_cam.x, y_cam.y, y_cam.z]);
    let results: Vec<(Option<ShadeOutput<f64>>, Option<(Vec<f64>, bool)>)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let Some(inp) = pixel_inputs(&gb, i) else {
                return (None, None);
            };
            let omega_o = view_dir(cam, i % w, i / w);
            let local = grid.map(|g| {
                let p = surface_point(&gb, i);
                let n = Vector3::from(inp.normal);
                let c = n.dot(&Vector3::from(omega_o));
                let refl = n * (2.0 * c) - Vector3::from(omega_o);
                (g.weights(&p), !g.visible(&p, &n, &refl))
            });
            let light = pixel_light(env, grid, &local);
            let out = shade(&inp, omega_o, x_cam, y_cam, &light, lut).map(|s| s.0);
            (out, local)
        })
        .collect();
    let mut diffuse = StokesImage::zeros(w, h, Component::Diffuse);
    let mut specular = StokesImage::zeros(w, h, Component::Specular);
    let mut total = StokesImage::zeros(w, h, Component::Total);
    let mut local = Vec::with_capacity(w * h);
    for (i, (out, loc)) in results.into_iter().enumerate() {
        if let Some(o) = out {
            let planes_d = [&mut diffuse.s0, &mut diffuse.s1, &mut diffuse.s2];
            for (p, plane) in planes_d.into_iter().enumerate() {
                plane[i] = o.diffuse[p];
            }
            let planes_s = [&mut specular.s0, &mut specular.s1, &mut specular.s2];
            for (p, plane) in planes_s.into_iter().enumerate() {
                plane[i] = o.specular[p];
            }
            let planes_t = [&mut total.s0, &mut total.s1, &mut total.s2];
            for (p, plane) in planes_t.into_iter().enumerate() {
                plane[i] = [0, 1, 2].map(|c| o.diffuse[p][c] + o.specular[p][c]);
            }
        }
        local.push(loc);
    }
    Ok(RenderState {
        images: PolarImages {
            total,
            diffuse,
            specular,
        },
        gbuffer: gb,
        fragments,
        local,
    })
}

/// Render total, diffuse and specular Stokes images of one view.
pub fn render_polar(
    scene: &[SurfelGaussian],
    cam: &Camera,
    env: &EnvCubeMipmap,
    lut: Option<&SplitSumLut>,
    grid: Option<&AnchorGrid>,
) -> Result<PolarImages> {
    Ok(render_state(scene, cam, env, lut, grid)?.images)
}

/// Intensity behind an ideal linear polarizer at angle `theta`.
pub fn simulate_lp_capture(img: &StokesImage, theta: f64) -> Vec<Rgb> {
    let m = mueller_lp(theta).0;
    (0..img.len())
        .map(|i| {
            let (a, b, c) = (img.s0[i], img.s1[i], img.s2[i]);
            [0, 1, 2].map(|k| m[(0, 0)] * a[k] + m[(0, 1)] * b[k] + m[(0, 2)] * c[k])
        })
        .collect()
}
