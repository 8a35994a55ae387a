//! Self-occlusion-aware lighting from anchor-local cube maps.
//!
//! Anchors sit on a slightly enlarged bounding box of the object. Each one
//! owns a cube map built by casting one ray per texel: rays that hit the
//! object store that surfel's diffuse exitance under the global map, rays
//! that miss copy the global map. Surface points blend the anchors' maps by
//! distance, and mirror directions blocked by the object fall back to the
//! blended local maps for their specular term.

use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::Real;
use crate::envlight::{CubeGrid, EnvCubeMipmap, FACES};
use crate::polcore::SpectralStokes;
use crate::surfel::{Aabb, SurfelGaussian, MIN_ROUGHNESS};
use crate::toolkit::FloatImage;
use crate::{Error, Result};

/// Scale applied to the object box before placing anchors.
pub const ANCHOR_BOX_SCALE: f64 = 1.1;
/// Lattice points per box edge.
const LATTICE: usize = 4;
/// Default local cube map resolution.
pub const DEFAULT_RESOLUTION: usize = 64;
/// Default iterations between rebuilds.
pub const DEFAULT_REFRESH: usize = 300;
/// A surfel blocks a ray where `opacity · weight` reaches this.
pub const HIT_THRESHOLD: f64 = 0.5;
/// Distance floor for inverse weighting.
const INVERSE_EPS: f64 = 1e-6;

/// How anchor contributions are weighted by distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// `w_i = ‖p − c_i‖`.
    #[default]
    Literal,
    /// `w_i = 1 / max(‖p − c_i‖, ε)`.
    Inverse,
}

impl Weighting {
    pub fn weight(self, dist: f64) -> f64 {
        match self {
            Weighting::Literal => dist,
            Weighting::Inverse => 1.0 / dist.max(INVERSE_EPS),
        }
    }
}

/// Lattice points on the faces of `bbox` scaled by [`ANCHOR_BOX_SCALE`]:
/// a 4×4 grid per face, shared points merged, and the four points inside
/// the bottom (`-z`) face removed.
pub fn place_anchors(bbox: &Aabb) -> Vec<Vector3<f64>> {
    let b = bbox.scaled(ANCHOR_BOX_SCALE);
    let n = LATTICE - 1;
    let mut out = Vec::new();
    for i in 0..LATTICE {
        for j in 0..LATTICE {
            for k in 0..LATTICE {
                let idx = [i, j, k];
                let on_surface = idx.iter().any(|&v| v == 0 || v == n);
                let bottom_interior = k == 0 && (1..n).contains(&i) && (1..n).contains(&j);
                if !on_surface || bottom_interior {
                    continue;
                }
                let t = |v: usize| v as f64 / n as f64;
                out.push(Vector3::new(
                    b.min.x + (b.max.x - b.min.x) * t(i),
                    b.min.y + (b.max.y - b.min.y) * t(j),
                    b.min.z + (b.max.z - b.min.z) * t(k),
                ));
            }
        }
    }
    out
}

/// Nearest accepted hit along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub surfel: usize,
}

#[derive(Debug, Clone)]
struct BvhNode {
    bounds: Aabb,
    /// Leaf: `start..start + count` into `order`; inner: children.
    start: usize,
    count: usize,
    left: usize,
    right: usize,
}

/// Bounding volume hierarchy over the blocking footprint of each surfel.
#[derive(Debug, Clone)]
pub struct SceneBvh {
    surfels: Vec<SurfelGaussian>,
    nodes: Vec<BvhNode>,
    order: Vec<usize>,
}

/// Radius (in scale units) inside which `opacity · G ≥ HIT_THRESHOLD`.
fn blocking_radius(opacity: f64) -> Option<f64> {
    if opacity < HIT_THRESHOLD {
        return None;
    }
    Some((2.0 * (opacity / HIT_THRESHOLD).ln()).sqrt())
}

fn surfel_bounds(g: &SurfelGaussian, radius: f64) -> Aabb {
    let mut b = Aabb::empty();
    let half = Vector3::from_fn(|k, _| {
        ((g.t_u[k] * g.scale_u).powi(2) + (g.t_v[k] * g.scale_v).powi(2)).sqrt() * radius
    });
    b.grow(&(g.position - half));
    b.grow(&(g.position + half));
    b
}

impl SceneBvh {
    pub fn build(scene: &[SurfelGaussian]) -> Self {
        let mut order: Vec<usize> = Vec::new();
        let mut boxes = vec![Aabb::empty(); scene.len()];
        for (i, g) in scene.iter().enumerate() {
            if let Some(r) = blocking_radius(g.opacity) {
                if !g.is_degenerate() {
                    boxes[i] = surfel_bounds(g, r);
                    order.push(i);
                }
            }
        }
        let mut bvh = Self {
            surfels: scene.to_vec(),
            nodes: Vec::new(),
            order,
        };
        if !bvh.order.is_empty() {
            let n = bvh.order.len();
            bvh.split(&boxes, 0, n);
        }
        bvh
    }

    fn split(&mut self, boxes: &[Aabb], start: usize, count: usize) -> usize {
        let mut bounds = Aabb::empty();
        for &i in &self.order[start..start + count] {
            bounds = bounds.union(&boxes[i]);
        }
        let id = self.nodes.len();
        self.nodes.push(BvhNode {
            bounds,
            start,
            count,
            left: 0,
            right: 0,
        });
        if count <= 4 {
            return id;
        }
        let ext = bounds.extent();
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let slice = &mut self.order[start..start + count];
        slice.sort_by(|&a, &b| {
            boxes[a].center()[axis]
                .total_cmp(&boxes[b].center()[axis])
                .then(a.cmp(&b))
        });
        let half = count / 2;
        let left = self.split(boxes, start, half);
        let right = self.split(boxes, start + half, count - half);
        let node = &mut self.nodes[id];
        node.left = left;
        node.right = right;
        node.count = 0;
        id
    }

    pub fn surfels(&self) -> &[SurfelGaussian] {
        &self.surfels
    }

    /// Nearest hit with `t > t_min`. With `cull_back`, surfels whose normal
    /// points along the ray are ignored.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_min: f64, cull_back: bool) -> Option<RayHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut best: Option<RayHit> = None;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            let limit = best.map_or(f64::INFINITY, |h| h.t);
            if !slab_test(&node.bounds, origin, &inv, t_min, limit) {
                continue;
            }
            if node.count == 0 {
                stack.push(node.left);
                stack.push(node.right);
                continue;
            }
            for &i in &self.order[node.start..node.start + node.count] {
                if let Some(t) = self.hit_surfel(i, origin, dir, t_min, cull_back) {
                    let better = match best {
                        None => true,
                        Some(b) => t < b.t || (t == b.t && i < b.surfel),
                    };
                    if better {
                        best = Some(RayHit { t, surfel: i });
                    }
                }
            }
        }
        best
    }

    fn hit_surfel(&self, i: usize, o: &Vector3<f64>, d: &Vector3<f64>, t_min: f64, cull_back: bool) -> Option<f64> {
        let g = &self.surfels[i];
        let n = g.normal();
        let den = n.dot(d);
        if den.abs() < 1e-12 || (cull_back && den >= 0.0) {
            return None;
        }
        let t = n.dot(&(g.position - o)) / den;
        if !(t > t_min) {
            return None;
        }
        let q = o + d * t - g.position;
        let u = q.dot(&g.t_u) / g.scale_u;
        let v = q.dot(&g.t_v) / g.scale_v;
        let w = (-(u * u + v * v) * 0.5).exp();
        (g.opacity * w >= HIT_THRESHOLD).then_some(t)
    }
}

fn slab_test(b: &Aabb, o: &Vector3<f64>, inv: &Vector3<f64>, t_min: f64, t_max: f64) -> bool {
    let mut lo = t_min;
    let mut hi = t_max;
    for k in 0..3 {
        let t0 = (b.min[k] - o[k]) * inv[k];
        let t1 = (b.max[k] - o[k]) * inv[k];
        let (a, c) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
        // NaN from 0 · ∞ means the ray lies in the slab plane: keep it
        if a.is_nan() || c.is_nan() {
            continue;
        }
        lo = lo.max(a);
        hi = hi.min(c);
        if lo > hi {
            return false;
        }
    }
    true
}

/// Offset for ray origins leaving the surface.
pub fn ray_offset(bbox: &Aabb) -> f64 {
    1e-4 * bbox.diagonal()
}

/// Whether direction `dir` leaving surface point `p` (normal `n`) escapes
/// the object.
pub fn visibility(p: &Vector3<f64>, n: &Vector3<f64>, dir: &Vector3<f64>, scene: &[SurfelGaussian]) -> bool {
    let bvh = SceneBvh::build(scene);
    visible_with(&bvh, ray_offset(&Aabb::of_scene(scene)), p, n, dir)
}

fn visible_with(bvh: &SceneBvh, eps: f64, p: &Vector3<f64>, n: &Vector3<f64>, dir: &Vector3<f64>) -> bool {
    let d = dir.normalize();
    bvh.cast(&(p + n * eps), &d, 0.0, true).is_none()
}

/// Radiance seen from `anchor` in every texel direction of a `res` cube.
pub fn build_local_cubemap(anchor: &Vector3<f64>, bvh: &SceneBvh, env: &EnvCubeMipmap, res: usize) -> CubeGrid {
    let texels: Vec<[f64; 3]> = (0..FACES * res * res)
        .into_par_iter()
        .map(|t| {
            let face = t / (res * res);
            let row = (t / res) % res;
            let col = t % res;
            let d = crate::envlight::texel_dir(res, face, col, row);
            let dir = Vector3::from(d);
            match bvh.cast(anchor, &dir, 0.0, false) {
                Some(hit) => {
                    let g = &bvh.surfels()[hit.surfel];
                    let mut n = g.normal();
                    if n.dot(&dir) > 0.0 {
                        n = -n;
                    }
                    let irr = env.irradiance([n.x, n.y, n.z]);
                    [0, 1, 2].map(|c| g.albedo[c] * std::f64::consts::FRAC_1_PI * irr[c])
                }
                None => env.sample(d, MIN_ROUGHNESS),
            }
        })
        .collect();
    CubeGrid { res, data: texels }
}

/// `Σ w_i S_i / Σ w_i` with distance weights to the anchors.
pub fn localized_diffuse(
    p: &Vector3<f64>,
    per_anchor: &[SpectralStokes],
    anchors: &[Vector3<f64>],
    weighting: Weighting,
) -> Result<SpectralStokes> {
    if per_anchor.len() != anchors.len() {
        return Err(Error::mismatch(anchors.len(), per_anchor.len()));
    }
    let w = anchor_weights(p, anchors, weighting);
    let mut out = SpectralStokes::ZERO;
    for (s, wi) in per_anchor.iter().zip(w) {
        out = out.add(&s.scale(wi));
    }
    Ok(out)
}

/// Normalized anchor weights at `p`.
pub fn anchor_weights(p: &Vector3<f64>, anchors: &[Vector3<f64>], weighting: Weighting) -> Vec<f64> {
    let mut w: Vec<f64> = anchors.iter().map(|c| weighting.weight((p - c).norm())).collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        for x in w.iter_mut() {
            *x /= total;
        }
    } else {
        let k = 1.0 / w.len().max(1) as f64;
        w.iter_mut().for_each(|x| *x = k);
    }
    w
}

/// Build settings for an [`AnchorGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub resolution: usize,
    pub refresh_interval: usize,
    pub weighting: Weighting,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            refresh_interval: DEFAULT_REFRESH,
            weighting: Weighting::Literal,
        }
    }
}

/// Anchors with their local cube maps. The maps are constants between
/// rebuilds: no gradient flows into them.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub anchors: Vec<Vector3<f64>>,
    pub cubemaps: Vec<EnvCubeMipmap>,
    pub bbox: Aabb,
    pub config: GridConfig,
    /// Iteration of the last rebuild.
    pub last_build: usize,
    bvh: SceneBvh,
    eps: f64,
}

impl AnchorGrid {
    /// Place anchors around `scene` and build every local cube map.
    pub fn build(scene: &[SurfelGaussian], env: &EnvCubeMipmap, config: GridConfig, iteration: usize) -> Result<Self> {
        if config.refresh_interval == 0 {
            return Err(Error::Config("GridMap refresh interval must be >= 1".into()));
        }
        if scene.is_empty() {
            return Err(Error::Config("GridMap needs a non-empty scene".into()));
        }
        let bbox = Aabb::of_scene(scene);
        if bbox.diagonal() <= 0.0 {
            return Err(Error::Config("GridMap needs a non-degenerate bounding box".into()));
        }
        let anchors = place_anchors(&bbox);
        let bvh = SceneBvh::build(scene);
        let cubemaps = anchors
            .iter()
            .map(|a| EnvCubeMipmap::from_radiance(build_local_cubemap(a, &bvh, env, config.resolution)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            anchors,
            cubemaps,
            eps: ray_offset(&bbox),
            bbox,
            config,
            last_build: iteration,
            bvh,
        })
    }

    /// Rebuild when `iteration − last_build ≥ refresh_interval`. Returns
    /// whether a rebuild happened.
    pub fn refresh_if_stale(&mut self, scene: &[SurfelGaussian], env: &EnvCubeMipmap, iteration: usize) -> Result<bool> {
        if iteration.saturating_sub(self.last_build) < self.config.refresh_interval {
            return Ok(false);
        }
        *self = Self::build(scene, env, self.config, iteration)?;
        Ok(true)
    }

    pub fn weights(&self, p: &Vector3<f64>) -> Vec<f64> {
        anchor_weights(p, &self.anchors, self.config.weighting)
    }

    /// Whether the direction escapes the object from surface point `p`.
    pub fn visible(&self, p: &Vector3<f64>, n: &Vector3<f64>, dir: &Vector3<f64>) -> bool {
        visible_with(&self.bvh, self.eps, p, n, dir)
    }

    /// Weighted blend of a per-map quantity.
    #[inline]
    pub fn blend<T: Real>(&self, weights: &[f64], f: impl Fn(&EnvCubeMipmap) -> [T; 3]) -> [T; 3] {
        let mut out = [T::cst(0.0); 3];
        for (m, &w) in self.cubemaps.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let v = f(m);
            for c in 0..3 {
                out[c] += v[c] * w;
            }
        }
        out
    }

    /// Write anchors and local cube maps (base level radiance).
    pub fn save(&self, path: &Path) -> Result<()> {
        let res = self.config.resolution;
        let mut img = FloatImage::new(res, res, "gridmap");
        for (a, (pos, map)) in self.anchors.iter().zip(&self.cubemaps).enumerate() {
            img.meta.push((format!("anchor{a}.x"), pos.x));
            img.meta.push((format!("anchor{a}.y"), pos.y));
            img.meta.push((format!("anchor{a}.z"), pos.z));
            for face in 0..FACES {
                for c in 0..3 {
                    let plane: Vec<f64> = (0..res * res)
                        .map(|t| map.base().data[face * res * res + t][c])
                        .collect();
                    img.push_plane(&format!("a{a}.f{face}.{}", ["r", "g", "b"][c]), &plane)?;
                }
            }
        }
        img.meta.push(("last_build".into(), self.last_build as f64));
        img.meta.push(("refresh_interval".into(), self.config.refresh_interval as f64));
        img.meta.push((
            "inverse_weighting".into(),
            (self.config.weighting == Weighting::Inverse) as u8 as f64,
        ));
        img.save(path)
    }

    /// Read a grid written by [`Self::save`]; `scene` supplies the geometry
    /// used for visibility queries.
    pub fn load(path: &Path, scene: &[SurfelGaussian]) -> Result<Self> {
        let img = FloatImage::load(path)?;
        if img.tag != "gridmap" || img.width != img.height {
            return Err(Error::Format("not a GridMap file".into()));
        }
        let res = img.width;
        let count = img.planes() / (FACES * 3);
        if count * FACES * 3 != img.planes() {
            return Err(Error::Format("GridMap plane count is not a multiple of 18".into()));
        }
        let meta = |k: &str| -> Result<f64> {
            img.meta_value(k)
                .ok_or_else(|| Error::Format(format!("GridMap file lacks `{k}`")))
        };
        let mut anchors = Vec::with_capacity(count);
        let mut cubemaps = Vec::with_capacity(count);
        for a in 0..count {
            anchors.push(Vector3::new(
                meta(&format!("anchor{a}.x"))?,
                meta(&format!("anchor{a}.y"))?,
                meta(&format!("anchor{a}.z"))?,
            ));
            let mut grid = CubeGrid::constant(res, [0.0; 3]);
            for face in 0..FACES {
                for c in 0..3 {
                    let plane = img.plane((a * FACES + face) * 3 + c);
                    for (t, v) in plane.iter().enumerate() {
                        grid.data[face * res * res + t][c] = *v as f64;
                    }
                }
            }
            cubemaps.push(EnvCubeMipmap::from_radiance(grid)?);
        }
        let bbox = Aabb::of_scene(scene);
        let config = GridConfig {
            resolution: res,
            refresh_interval: (meta("refresh_interval")? as usize).max(1),
            weighting: if meta("inverse_weighting")? != 0.0 {
                Weighting::Inverse
            } else {
                Weighting::Literal
            },
        };
        Ok(Self {
            anchors,
            cubemaps,
            eps: ray_offset(&bbox),
            bbox,
            config,
            last_build: meta("last_build")? as usize,
            bvh: SceneBvh::build(scene),
        })
    }
}
