//! 2D Gaussian surfels, pinhole cameras, ray-splat intersection and the
//! front-to-back alpha-blended G-buffer rasterizer.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::optim::ior_activation;
use crate::{Error, Result, Rgb};

/// Minimum roughness represented by the environment mipmap.
pub const MIN_ROUGHNESS: f64 = 0.08;
/// Per-pixel blending stops once transmittance drops below this.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
/// Fragments with a Gaussian weight below this are ignored.
pub const MIN_WEIGHT: f64 = 1.0 / 255.0;
/// Scales below this are treated as degenerate.
const DEGENERATE_SCALE: f64 = 1e-12;

/// One planar Gaussian primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfelGaussian {
    pub position: Vector3<f64>,
    pub t_u: Vector3<f64>,
    pub t_v: Vector3<f64>,
    pub scale_u: f64,
    pub scale_v: f64,
    pub opacity: f64,
    pub albedo: Rgb,
    pub roughness: f64,
    /// Unconstrained IoR parameter; see [`ior_activation`].
    pub ior_latent: f64,
}

impl SurfelGaussian {
    /// Surfel at `position` facing `normal` with an isotropic scale.
    pub fn facing(position: Vector3<f64>, normal: Vector3<f64>, scale: f64) -> Self {
        let n = normal.normalize();
        let helper = if n.z.abs() < 0.9 {
            Vector3::z()
        } else {
            Vector3::x()
        };
        let t_u = helper.cross(&n).normalize();
        let t_v = n.cross(&t_u);
        Self {
            position,
            t_u,
            t_v,
            scale_u: scale,
            scale_v: scale,
            opacity: 1.0,
            albedo: [0.5; 3],
            roughness: 0.5,
            ior_latent: 0.0,
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.t_u.cross(&self.t_v)
    }

    pub fn ior(&self) -> f64 {
        ior_activation(self.ior_latent)
    }

    /// Maps tangent-plane coordinates to world space.
    pub fn local_to_world(&self, u: f64, v: f64) -> Vector3<f64> {
        self.position + self.t_u * (self.scale_u * u) + self.t_v * (self.scale_v * v)
    }

    /// Homogeneous 4×4 form of [`Self::local_to_world`] acting on `[u, v, 1, 1]`.
    pub fn local_frame(&self) -> Matrix4<f64> {
        let a = self.t_u * self.scale_u;
        let b = self.t_v * self.scale_v;
        let p = self.position;
        Matrix4::new(
            a.x, b.x, 0.0, p.x, //
            a.y, b.y, 0.0, p.y, //
            a.z, b.z, 0.0, p.z, //
            0.0, 0.0, 0.0, 1.0,
        )
    }

    /// Re-orthonormalize the tangent frame (Gram-Schmidt on `t_u`, `t_v`).
    pub fn orthonormalize(&mut self) {
        self.t_u = self.t_u.normalize();
        self.t_v = (self.t_v - self.t_u * self.t_u.dot(&self.t_v)).normalize();
    }

    /// Rotate the tangent frame by the rotation vector `a·t_u + b·t_v`.
    pub fn rotate_frame(&mut self, a: f64, b: f64) {
        let w = self.t_u * a + self.t_v * b;
        let angle = w.norm();
        if angle == 0.0 {
            return;
        }
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(w), angle);
        self.t_u = rot * self.t_u;
        self.t_v = rot * self.t_v;
        self.orthonormalize();
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.scale_u > DEGENERATE_SCALE && self.scale_v > DEGENERATE_SCALE)
    }
}

/// Pinhole camera with an OpenCV-style frame: `x` right, `y` down, `z`
/// forward. `rotation`/`translation` map world points into camera space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with vertical field of view
    /// `fov_y` (radians) and the principal point at the image center.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let f = (target - eye).normalize();
        let mut right = f.cross(&up);
        if right.norm() < 1e-9 {
            right = f.cross(&Vector3::x());
        }
        let right = right.normalize();
        let down = f.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), f.transpose()]);
        let translation = -(rotation * eye);
        let fy = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Self {
            rotation,
            translation,
            fx: fy,
            fy,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }

    /// The 4×4 world-to-camera transform.
    pub fn world_to_camera(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn x_axis(&self) -> Vector3<f64> {
        self.rotation.row(0).transpose()
    }

    pub fn y_axis(&self) -> Vector3<f64> {
        self.rotation.row(1).transpose()
    }

    pub fn z_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Camera-space ray direction through the center of pixel `(x, y)`,
    /// scaled so its `z` component is one.
    pub fn ray_camera(&self, x: usize, y: usize) -> Vector3<f64> {
        Vector3::new(
            (x as f64 + 0.5 - self.cx) / self.fx,
            (y as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }

    /// World-space counterpart of [`Self::ray_camera`] (unit camera depth).
    pub fn ray_world(&self, x: usize, y: usize) -> Vector3<f64> {
        self.rotation.transpose() * self.ray_camera(x, y)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates (continuous, pixel centers at `i + 0.5`) and depth.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= 1e-9 {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        if (rtr - Matrix3::identity()).abs().max() > 1e-9 {
            return Err(Error::Config("camera rotation is not orthonormal".into()));
        }
        if self.width == 0 || self.height == 0 || !(self.fx > 0.0) || !(self.fy > 0.0) {
            return Err(Error::Config("camera intrinsics are invalid".into()));
        }
        Ok(())
    }
}

/// Camera-space quantities of a surfel reused for every pixel.
#[derive(Debug, Clone, Copy)]
pub struct SurfelView {
    pub p: Vector3<f64>,
    pub tu: Vector3<f64>,
    pub tv: Vector3<f64>,
    pub n: Vector3<f64>,
    pub su: f64,
    pub sv: f64,
    degenerate: bool,
}

impl SurfelView {
    pub fn new(cam: &Camera, g: &SurfelGaussian) -> Self {
        let tu = cam.rotation * g.t_u;
        let tv = cam.rotation * g.t_v;
        Self {
            p: cam.to_camera(&g.position),
            tu,
            tv,
            n: tu.cross(&tv),
            su: g.scale_u,
            sv: g.scale_v,
            degenerate: g.is_degenerate(),
        }
    }

    /// Intersect the camera ray `d` (camera space, `d.z = 1`).
    #[inline]
    pub fn intersect(&self, d: &Vector3<f64>) -> Option<Hit> {
        if self.degenerate {
            return None;
        }
        let den = self.n.dot(d);
        if den.abs() < 1e-12 {
            return None;
        }
        let z = self.n.dot(&self.p) / den;
        if !(z > 0.0) {
            return None;
        }
        let q = d * z - self.p;
        Some(Hit {
            u: q.dot(&self.tu) / self.su,
            v: q.dot(&self.tv) / self.sv,
            z,
        })
    }
}

/// Tangent-plane coordinates and camera depth of a ray-splat intersection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

/// Intersection of the ray through pixel `(x, y)` with the surfel's plane.
pub fn ray_splat_intersect(cam: &Camera, pixel: (usize, usize), g: &SurfelGaussian) -> Option<Hit> {
    SurfelView::new(cam, g).intersect(&cam.ray_camera(pixel.0, pixel.1))
}

#[inline]
pub fn gaussian_weight(u: f64, v: f64) -> f64 {
    (-(u * u + v * v) * 0.5).exp()
}

/// One surfel's contribution to one pixel, in blending order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub surfel: u32,
    pub u: f64,
    pub v: f64,
    pub z: f64,
    pub weight: f64,
    pub alpha: f64,
    /// Transmittance in front of this fragment.
    pub transmittance: f64,
}

/// Blended fragments of every pixel, stored contiguously.
#[derive(Debug, Clone, Default)]
pub struct FragmentList {
    pub offsets: Vec<usize>,
    pub fragments: Vec<Fragment>,
}

impl FragmentList {
    pub fn pixel(&self, i: usize) -> &[Fragment] {
        &self.fragments[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Per-view alpha-blended material maps. Attributes hold the raw blends
/// `Σ a_i T_i α_i`; `normal` is the renormalized blended normal.
#[derive(Debug, Clone, PartialEq)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    pub albedo: Vec<Rgb>,
    pub normal: Vec<[f64; 3]>,
    pub normal_blend: Vec<[f64; 3]>,
    pub roughness: Vec<f64>,
    pub ior: Vec<f64>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    pub world_position: Vec<[f64; 3]>,
}

impl GBuffer {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            albedo: vec![[0.0; 3]; n],
            normal: vec![[0.0; 3]; n],
            normal_blend: vec![[0.0; 3]; n],
            roughness: vec![0.0; n],
            ior: vec![0.0; n],
            depth: vec![0.0; n],
            opacity: vec![0.0; n],
            world_position: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Opacity-normalized depth, zero where nothing was blended.
    pub fn surface_depth(&self, i: usize) -> f64 {
        if self.opacity[i] > 0.0 {
            self.depth[i] / self.opacity[i]
        } else {
            0.0
        }
    }
}

/// Per-surfel blended attributes in the order used by [`blend_pixel`].
pub(crate) struct SurfelAttrs {
    pub albedo: Rgb,
    pub roughness: f64,
    pub ior: f64,
    pub normal: [f64; 3],
    pub opacity: f64,
}

pub(crate) fn surfel_attrs(scene: &[SurfelGaussian]) -> Vec<SurfelAttrs> {
    scene
        .iter()
        .map(|g| {
            let n = g.normal();
            SurfelAttrs {
                albedo: g.albedo,
                roughness: g.roughness,
                ior: g.ior(),
                normal: [n.x, n.y, n.z],
                opacity: g.opacity,
            }
        })
        .collect()
}

/// Conservative pixel bounding box of the surfel's weight footprint, as
/// inclusive `(x0, x1, y0, y1)`; `None` when it misses the image.
fn footprint(cam: &Camera, g: &SurfelGaussian) -> Option<(usize, usize, usize, usize)> {
    if g.is_degenerate() {
        return None;
    }
    // G ≥ 1/255 ⇔ u² + v² ≤ 2 ln 255
    let r = (2.0 * 255f64.ln()).sqrt() * 1.001;
    let (w, h) = (cam.width as f64, cam.height as f64);
    let mut bounds = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for (a, b) in [(-r, -r), (r, -r), (-r, r), (r, r)] {
        match cam.project(&g.local_to_world(a, b)) {
            Some((x, y, _)) => {
                bounds[0] = bounds[0].min(x);
                bounds[1] = bounds[1].max(x);
                bounds[2] = bounds[2].min(y);
                bounds[3] = bounds[3].max(y);
            }
            None => return Some((0, cam.width - 1, 0, cam.height - 1)),
        }
    }
    let x0 = (bounds[0] - 1.5).floor().max(0.0);
    let x1 = (bounds[1] + 0.5).ceil().min(w - 1.0);
    let y0 = (bounds[2] - 1.5).floor().max(0.0);
    let y1 = (bounds[3] + 0.5).ceil().min(h - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

/// Sorts candidate hits front to back (ties by surfel index) and blends
/// them, writing the pixel's G-buffer entries and the fragments used.
pub(crate) fn blend_pixel(
    mut hits: Vec<(u32, Hit, f64)>,
    attrs: &[SurfelAttrs],
    cam_center: &Vector3<f64>,
    ray_world: &Vector3<f64>,
    out: &mut PixelBlend,
) {
    hits.sort_by(|a, b| a.1.z.total_cmp(&b.1.z).then(a.0.cmp(&b.0)));
    let mut t = 1.0;
    for (idx, hit, weight) in hits {
        let a = &attrs[idx as usize];
        let alpha = a.opacity * weight;
        let w = t * alpha;
        for c in 0..3 {
            out.albedo[c] += a.albedo[c] * w;
            out.normal[c] += a.normal[c] * w;
        }
        out.roughness += a.roughness * w;
        out.ior += a.ior * w;
        out.depth += hit.z * w;
        out.opacity += w;
        out.fragments.push(Fragment {
            surfel: idx,
            u: hit.u,
            v: hit.v,
            z: hit.z,
            weight,
            alpha,
            transmittance: t,
        });
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_EPS {
            break;
        }
    }
    let pos = cam_center * out.opacity + ray_world * out.depth;
    out.world_position = [pos.x, pos.y, pos.z];
}

#[derive(Debug, Default)]
pub(crate) struct PixelBlend {
    pub albedo: Rgb,
    pub normal: [f64; 3],
    pub roughness: f64,
    pub ior: f64,
    pub depth: f64,
    pub opacity: f64,
    pub world_position: [f64; 3],
    pub fragments: Vec<Fragment>,
}

/// Renormalized normal, zero where nothing was blended.
pub(crate) fn unit_normal(blend: [f64; 3], opacity: f64) -> [f64; 3] {
    let len = (blend[0] * blend[0] + blend[1] * blend[1] + blend[2] * blend[2]).sqrt();
    if opacity > 0.0 && len > 0.0 {
        [blend[0] / len, blend[1] / len, blend[2] / len]
    } else {
        [0.0; 3]
    }
}

/// Rasterize the scene into a G-buffer, also returning the fragments each
/// pixel blended (needed by the backward pass).
pub fn rasterize_with_fragments(scene: &[SurfelGaussian], cam: &Camera) -> (GBuffer, FragmentList) {
    let (w, h) = (cam.width, cam.height);
    let views: Vec<SurfelView> = scene.iter().map(|g| SurfelView::new(cam, g)).collect();
    let attrs = surfel_attrs(scene);
    let mut rows: Vec<Vec<(u32, usize, usize)>> = vec![Vec::new(); h];
    for (i, g) in scene.iter().enumerate() {
        if let Some((x0, x1, y0, y1)) = footprint(cam, g) {
            for row in rows.iter_mut().take(y1 + 1).skip(y0) {
                row.push((i as u32, x0, x1));
            }
        }
    }
    let center = cam.center();
    let row_results: Vec<Vec<PixelBlend>> = rows
        .par_iter()
        .enumerate()
        .map(|(y, cands)| {
            (0..w)
                .map(|x| {
                    let d = cam.ray_camera(x, y);
                    let mut hits = Vec::new();
                    for &(idx, x0, x1) in cands {
                        if x < x0 || x > x1 {
                            continue;
                        }
                        if let Some(hit) = views[idx as usize].intersect(&d) {
                            let weight = gaussian_weight(hit.u, hit.v);
                            if weight >= MIN_WEIGHT {
                                hits.push((idx, hit, weight));
                            }
                        }
                    }
                    let mut out = PixelBlend::default();
                    blend_pixel(hits, &attrs, &center, &cam.ray_world(x, y), &mut out);
                    out
                })
                .collect()
        })
        .collect();

    let mut gb = GBuffer::empty(w, h);
    let mut frags = FragmentList {
        offsets: Vec::with_capacity(w * h + 1),
        fragments: Vec::new(),
    };
    frags.offsets.push(0);
    for (i, px) in row_results.into_iter().flatten().enumerate() {
        gb.albedo[i] = px.albedo;
        gb.normal_blend[i] = px.normal;
        gb.normal[i] = unit_normal(px.normal, px.opacity);
        gb.roughness[i] = px.roughness;
        gb.ior[i] = px.ior;
        gb.depth[i] = px.depth;
        gb.opacity[i] = px.opacity;
        gb.world_position[i] = px.world_position;
        frags.fragments.extend(px.fragments);
        frags.offsets.push(frags.fragments.len());
    }
    (gb, frags)
}

pub fn rasterize(scene: &[SurfelGaussian], cam: &Camera) -> GBuffer {
    rasterize_with_fragments(scene, cam).0
}

/// Surface point of pixel `i` from its opacity-normalized depth.
fn unproject(gb: &GBuffer, cam: &Camera, x: usize, y: usize) -> Vector3<f64> {
    let i = y * gb.width + x;
    cam.center() + cam.ray_world(x, y) * gb.surface_depth(i)
}

/// Normal map from central differences of the unprojected depth, facing
/// the camera. Pixels without blended surface or missing a neighbor get a
/// zero normal.
pub fn depth_to_normal(gb: &GBuffer, cam: &Camera) -> Vec<[f64; 3]> {
    let (w, h) = (gb.width, gb.height);
    let mut out = vec![[0.0; 3]; w * h];
    let center = cam.center();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if let Some(n) = depth_normal_at(gb, cam, &center, x, y) {
                out[y * w + x] = [n.normal.x, n.normal.y, n.normal.z];
            }
        }
    }
    out
}

pub(crate) struct DepthNormal {
    pub normal: Vector3<f64>,
    pub cross: Vector3<f64>,
    pub sign: f64,
    pub dx: Vector3<f64>,
    pub dy: Vector3<f64>,
}

pub(crate) fn depth_normal_at(
    gb: &GBuffer,
    cam: &Camera,
    center: &Vector3<f64>,
    x: usize,
    y: usize,
) -> Option<DepthNormal> {
    let w = gb.width;
    let valid = |xx: usize, yy: usize| gb.opacity[yy * w + xx] > 0.0;
    if !(valid(x, y) && valid(x - 1, y) && valid(x + 1, y) && valid(x, y - 1) && valid(x, y + 1)) {
        return None;
    }
    let dx = unproject(gb, cam, x + 1, y) - unproject(gb, cam, x - 1, y);
    let dy = unproject(gb, cam, x, y + 1) - unproject(gb, cam, x, y - 1);
    let cross = dx.cross(&dy);
    let len = cross.norm();
    if len == 0.0 {
        return None;
    }
    let p = unproject(gb, cam, x, y);
    let sign = if cross.dot(&(center - p)) < 0.0 { -1.0 } else { 1.0 };
    Some(DepthNormal {
        normal: cross * (sign / len),
        cross,
        sign,
        dx,
        dy,
    })
}

/// Adjoint of [`depth_to_normal`]: accumulates gradients of the raw depth
/// and opacity maps given the gradient of the depth-normal map.
pub(crate) fn depth_to_normal_backward(
    gb: &GBuffer,
    cam: &Camera,
    grad_normal: &[[f64; 3]],
    grad_depth: &mut [f64],
    grad_opacity: &mut [f64],
) {
    let (w, h) = (gb.width, gb.height);
    let center = cam.center();
    let mut grad_point = vec![Vector3::zeros(); w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let g = Vector3::from(grad_normal[y * w + x]);
            if g == Vector3::zeros() {
                continue;
            }
            let Some(dn) = depth_normal_at(gb, cam, &center, x, y) else {
                continue;
            };
            let len = dn.cross.norm();
            let unit = dn.cross / len;
            let gs = g * dn.sign;
            let g_cross = (gs - unit * gs.dot(&unit)) / len;
            let g_dx = dn.dy.cross(&g_cross);
            let g_dy = g_cross.cross(&dn.dx);
            grad_point[y * w + x + 1] += g_dx;
            grad_point[y * w + x - 1] -= g_dx;
            grad_point[(y + 1) * w + x] += g_dy;
            grad_point[(y - 1) * w + x] -= g_dy;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let o = gb.opacity[i];
            if o <= 0.0 {
                continue;
            }
            let s = grad_point[i].dot(&cam.ray_world(x, y));
            grad_depth[i] += s / o;
            grad_opacity[i] -= s * gb.depth[i] / (o * o);
        }
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vector3::repeat(f64::INFINITY),
            max: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn grow(&mut self, p: &Vector3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&o.min),
            max: self.max.sup(&o.max),
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    /// Box scaled by `k` about its center.
    pub fn scaled(&self, k: f64) -> Aabb {
        let c = self.center();
        let half = self.extent() * (0.5 * k);
        Aabb {
            min: c - half,
            max: c + half,
        }
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Box of all surfel centers.
    pub fn of_scene(scene: &[SurfelGaussian]) -> Aabb {
        let mut b = Aabb::empty();
        for g in scene {
            b.grow(&g.position);
        }
        b
    }
}
