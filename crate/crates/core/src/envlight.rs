//! Distant lighting: latent cube maps, the roughness-indexed prefiltered
//! mip chain, cosine-weighted irradiance, and the split-sum BRDF table.
//!
//! Cube faces are ordered `+x, -x, +y, -y, +z, -z`. Within a face, texel
//! `(col, row)` has its center at `((col + 0.5)/D, (row + 0.5)/D)` in face
//! coordinates, and sampling is bilinear with clamp-to-edge per face.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;

use crate::dual::{v3, Real};
use crate::surfel::MIN_ROUGHNESS;
use crate::{Error, Result, Rgb};

pub const FACES: usize = 6;
/// Roughness of the last mip level.
pub const MAX_ROUGHNESS: f64 = 1.0;
const MAX_LEVELS: usize = 5;
const MIP_SAMPLES: usize = 512;

/// Latent-to-radiance activation: `sigmoid(x)` for `x ≤ 0`, `x + 0.5` above.
#[inline]
pub fn env_activation(x: f64) -> f64 {
    if x <= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        x + 0.5
    }
}

#[inline]
pub fn env_activation_grad(x: f64) -> f64 {
    if x <= 0.0 {
        let s = 1.0 / (1.0 + (-x).exp());
        s * (1.0 - s)
    } else {
        1.0
    }
}

/// Latent whose activation equals `radiance` (`radiance > 0`).
pub fn env_activation_inverse(radiance: f64) -> f64 {
    if radiance > 0.5 {
        radiance - 0.5
    } else {
        let r = radiance.max(1e-12);
        (r / (1.0 - r)).ln()
    }
}

/// Point `i` of an `n`-point Hammersley set on the unit square.
pub fn hammersley(i: usize, n: usize) -> (f64, f64) {
    let bits = (i as u32).reverse_bits();
    (i as f64 / n as f64, bits as f64 * (1.0 / 4_294_967_296.0))
}

/// GGX half-vector sample around `+z` for `alpha = roughness²`.
pub fn ggx_sample(u: (f64, f64), alpha: f64) -> [f64; 3] {
    let phi = 2.0 * std::f64::consts::PI * u.0;
    let cos_t = ((1.0 - u.1) / (1.0 + (alpha * alpha - 1.0) * u.1)).sqrt();
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    [sin_t * phi.cos(), sin_t * phi.sin(), cos_t]
}

/// GGX normal distribution for `alpha = roughness²`.
pub fn ggx_d(n_dot_h: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let d = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    a2 / (std::f64::consts::PI * d * d)
}

/// Orthonormal basis whose third axis is `n`.
pub fn basis(n: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if n[2].abs() < 0.999 {
        [0.0, 0.0, 1.0]
    } else {
        [1.0, 0.0, 0.0]
    };
    let t = normalize(cross(helper, n));
    (t, cross(n, t))
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let l = v3::norm(a);
    [a[0] / l, a[1] / l, a[2] / l]
}

/// Face index and face coordinates `(s, t) ∈ [0, 1]²` of a direction.
#[inline]
pub fn dir_to_face<T: Real>(d: [T; 3]) -> (usize, T, T) {
    let (ax, ay, az) = (d[0].val().abs(), d[1].val().abs(), d[2].val().abs());
    let (face, sc, tc, ma) = if ax >= ay && ax >= az {
        if d[0].val() > 0.0 {
            (0, -d[2], -d[1], d[0])
        } else {
            (1, d[2], -d[1], -d[0])
        }
    } else if ay >= az {
        if d[1].val() > 0.0 {
            (2, d[0], d[2], d[1])
        } else {
            (3, d[0], -d[2], -d[1])
        }
    } else if d[2].val() > 0.0 {
        (4, d[0], -d[1], d[2])
    } else {
        (5, -d[0], -d[1], -d[2])
    };
    (face, (sc / ma + 1.0) * 0.5, (tc / ma + 1.0) * 0.5)
}

/// Unnormalized direction for face coordinates `a, b ∈ [-1, 1]`.
pub fn face_to_dir(face: usize, a: f64, b: f64) -> [f64; 3] {
    match face {
        0 => [1.0, -b, -a],
        1 => [-1.0, -b, a],
        2 => [a, 1.0, b],
        3 => [a, -1.0, -b],
        4 => [a, -b, 1.0],
        _ => [-a, -b, -1.0],
    }
}

/// Unit direction through the center of a texel.
pub fn texel_dir(res: usize, face: usize, col: usize, row: usize) -> [f64; 3] {
    let a = 2.0 * (col as f64 + 0.5) / res as f64 - 1.0;
    let b = 2.0 * (row as f64 + 0.5) / res as f64 - 1.0;
    normalize(face_to_dir(face, a, b))
}

/// Exact solid angle subtended by a texel.
pub fn texel_solid_angle(res: usize, col: usize, row: usize) -> f64 {
    let area = |x: f64, y: f64| (x * y).atan2((x * x + y * y + 1.0).sqrt());
    let step = 2.0 / res as f64;
    let x0 = -1.0 + col as f64 * step;
    let y0 = -1.0 + row as f64 * step;
    let (x1, y1) = (x0 + step, y0 + step);
    area(x0, y0) - area(x0, y1) - area(x1, y0) + area(x1, y1)
}

/// Six square faces of RGB values.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeGrid {
    pub res: usize,
    pub data: Vec<Rgb>,
}

impl CubeGrid {
    pub fn constant(res: usize, value: Rgb) -> Self {
        Self {
            res,
            data: vec![value; FACES * res * res],
        }
    }

    pub fn from_fn(res: usize, mut f: impl FnMut([f64; 3]) -> Rgb) -> Self {
        let mut data = Vec::with_capacity(FACES * res * res);
        for face in 0..FACES {
            for row in 0..res {
                for col in 0..res {
                    data.push(f(texel_dir(res, face, col, row)));
                }
            }
        }
        Self { res, data }
    }

    #[inline]
    pub fn index(&self, face: usize, col: usize, row: usize) -> usize {
        (face * self.res + row) * self.res + col
    }

    pub fn texel_count(&self) -> usize {
        self.data.len()
    }

    /// The four bilinear taps `(texel, weight)` for `dir`.
    #[inline]
    pub fn footprint(&self, dir: [f64; 3]) -> [(usize, f64); 4] {
        let (face, s, t) = dir_to_face(dir);
        let (c0, c1, fx) = self.axis(s);
        let (r0, r1, fy) = self.axis(t);
        [
            (self.index(face, c0, r0), (1.0 - fx) * (1.0 - fy)),
            (self.index(face, c1, r0), fx * (1.0 - fy)),
            (self.index(face, c0, r1), (1.0 - fx) * fy),
            (self.index(face, c1, r1), fx * fy),
        ]
    }

    /// Texel containing `dir`.
    #[inline]
    pub fn nearest(&self, dir: [f64; 3]) -> usize {
        let (face, s, t) = dir_to_face(dir);
        let last = self.res - 1;
        let c = ((s * self.res as f64) as usize).min(last);
        let r = ((t * self.res as f64) as usize).min(last);
        self.index(face, c, r)
    }

    #[inline]
    fn axis(&self, s: f64) -> (usize, usize, f64) {
        let x = s * self.res as f64 - 0.5;
        let i0 = x.floor();
        let f = x - i0;
        let last = self.res as isize - 1;
        let a = (i0 as isize).clamp(0, last) as usize;
        let b = (i0 as isize + 1).clamp(0, last) as usize;
        (a, b, f)
    }

    /// Bilinear sample, differentiable in `dir` through the face coordinates.
    #[inline]
    pub fn sample<T: Real>(&self, dir: [T; 3]) -> [T; 3] {
        let (face, s, t) = dir_to_face(dir);
        let xs = s * self.res as f64 - 0.5;
        let ys = t * self.res as f64 - 0.5;
        let (c0, c1, _) = self.axis(s.val());
        let (r0, r1, _) = self.axis(t.val());
        let fx = xs - xs.val().floor();
        let fy = ys - ys.val().floor();
        let taps = [
            (self.index(face, c0, r0), (-fx + 1.0) * (-fy + 1.0)),
            (self.index(face, c1, r0), fx * (-fy + 1.0)),
            (self.index(face, c0, r1), (-fx + 1.0) * fy),
            (self.index(face, c1, r1), fx * fy),
        ];
        let mut out = [T::cst(0.0); 3];
        for (idx, w) in taps {
            let v = self.data[idx];
            for c in 0..3 {
                out[c] += w * v[c];
            }
        }
        out
    }

    /// `Σ value · solid angle` per channel.
    pub fn flux(&self) -> Rgb {
        let mut out = [0.0; 3];
        for face in 0..FACES {
            for row in 0..self.res {
                for col in 0..self.res {
                    let w = texel_solid_angle(self.res, col, row);
                    let v = self.data[self.index(face, col, row)];
                    for c in 0..3 {
                        out[c] += v[c] * w;
                    }
                }
            }
        }
        out
    }
}

/// Row-compressed sparse linear map between texel arrays.
#[derive(Debug, Clone, Default)]
pub struct SparseOp {
    starts: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl SparseOp {
    pub fn apply(&self, x: &[Rgb]) -> Vec<Rgb> {
        (0..self.starts.len() - 1)
            .map(|r| {
                let mut acc = [0.0; 3];
                for k in self.starts[r]..self.starts[r + 1] {
                    let v = x[self.cols[k] as usize];
                    let w = self.weights[k];
                    for c in 0..3 {
                        acc[c] += w * v[c];
                    }
                }
                acc
            })
            .collect()
    }

    /// `out += Aᵀ g`.
    pub fn apply_transpose_add(&self, g: &[Rgb], out: &mut [Rgb]) {
        for (r, gr) in g.iter().enumerate() {
            if *gr == [0.0; 3] {
                continue;
            }
            for k in self.starts[r]..self.starts[r + 1] {
                let o = &mut out[self.cols[k] as usize];
                let w = self.weights[k];
                for c in 0..3 {
                    o[c] += w * gr[c];
                }
            }
        }
    }

    pub fn nonzeros(&self) -> usize {
        self.weights.len()
    }
}

/// Number of mip levels for a base resolution (at most five, down to 1×1).
pub fn level_count(base_res: usize) -> usize {
    (base_res.trailing_zeros() as usize + 1).min(MAX_LEVELS)
}

/// Geometric roughness schedule from [`MIN_ROUGHNESS`] to [`MAX_ROUGHNESS`].
pub fn level_roughness(levels: usize) -> Vec<f64> {
    if levels == 1 {
        return vec![MIN_ROUGHNESS];
    }
    let ratio = MAX_ROUGHNESS / MIN_ROUGHNESS;
    (0..levels)
        .map(|l| {
            if l + 1 == levels {
                MAX_ROUGHNESS
            } else {
                MIN_ROUGHNESS * ratio.powf(l as f64 / (levels - 1) as f64)
            }
        })
        .collect()
}

/// GGX prefilter from a source grid of `src_res` into a grid of `res`.
/// Each output texel averages, by solid angle, the lobes centered on the
/// texel directions of a `quad_res` grid that it covers.
fn build_prefilter(src_res: usize, res: usize, quad_res: usize, roughness: f64, nearest: bool) -> SparseOp {
    let base = CubeGrid::constant(src_res, [0.0; 3]);
    let alpha = roughness * roughness;
    let sub = quad_res / res;
    let samples: Vec<[f64; 3]> = (0..MIP_SAMPLES)
        .map(|i| ggx_sample(hammersley(i, MIP_SAMPLES), alpha))
        .collect();
    let rows: Vec<Vec<(u32, f64)>> = (0..FACES * res * res)
        .into_par_iter()
        .map(|t| {
            let face = t / (res * res);
            let row = (t / res) % res;
            let col = t % res;
            let mut acc: Vec<(u32, f64)> = Vec::with_capacity(MIP_SAMPLES * 4 * sub * sub);
            let area = texel_solid_angle(res, col, row);
            for sr in 0..sub {
                for sc in 0..sub {
                    let (bc, br) = (col * sub + sc, row * sub + sr);
                    let n = texel_dir(quad_res, face, bc, br);
                    let share = texel_solid_angle(quad_res, bc, br) / area;
                    let (tx, ty) = basis(n);
                    let start = acc.len();
                    let mut total = 0.0;
                    for h in &samples {
                        let hw = [
                            tx[0] * h[0] + ty[0] * h[1] + n[0] * h[2],
                            tx[1] * h[0] + ty[1] * h[1] + n[1] * h[2],
                            tx[2] * h[0] + ty[2] * h[1] + n[2] * h[2],
                        ];
                        // view = normal, so L = 2 (N·H) H − N
                        let nh = h[2];
                        let l = [
                            2.0 * nh * hw[0] - n[0],
                            2.0 * nh * hw[1] - n[1],
                            2.0 * nh * hw[2] - n[2],
                        ];
                        let nl = v3::dot(n, l);
                        if nl <= 0.0 {
                            continue;
                        }
                        total += nl;
                        if nearest {
                            acc.push((base.nearest(l) as u32, nl));
                        } else {
                            for (idx, w) in base.footprint(l) {
                                if w > 0.0 {
                                    acc.push((idx as u32, w * nl));
                                }
                            }
                        }
                    }
                    let norm = share / total;
                    for e in &mut acc[start..] {
                        e.1 *= norm;
                    }
                }
            }
            acc.sort_by_key(|e| e.0);
            let mut merged: Vec<(u32, f64)> = Vec::with_capacity(acc.len());
            for (i, w) in acc {
                match merged.last_mut() {
                    Some(last) if last.0 == i => last.1 += w,
                    _ => merged.push((i, w)),
                }
            }
            merged
        })
        .collect();
    let mut op = SparseOp {
        starts: vec![0],
        ..SparseOp::default()
    };
    for row in rows {
        for (i, w) in row {
            op.cols.push(i);
            op.weights.push(w);
        }
        op.starts.push(op.cols.len());
    }
    op
}

type FilterSet = Arc<Vec<SparseOp>>;

/// Solid-angle weighted box downsample from `base_res` to `res`.
fn downsample_op(base_res: usize, res: usize) -> SparseOp {
    let f = base_res / res;
    let base = CubeGrid::constant(base_res, [0.0; 3]);
    let mut op = SparseOp {
        starts: vec![0],
        ..SparseOp::default()
    };
    for face in 0..FACES {
        for row in 0..res {
            for col in 0..res {
                let area = texel_solid_angle(res, col, row);
                let mut entries = Vec::with_capacity(f * f);
                for sr in 0..f {
                    for sc in 0..f {
                        let (bc, br) = (col * f + sc, row * f + sr);
                        entries.push((base.index(face, bc, br) as u32, texel_solid_angle(base_res, bc, br) / area));
                    }
                }
                entries.sort_by_key(|e| e.0);
                for (i, w) in entries {
                    op.cols.push(i);
                    op.weights.push(w);
                }
                op.starts.push(op.cols.len());
            }
        }
    }
    op
}

/// The product `a · b` (apply `b` first).
fn compose(a: &SparseOp, b: &SparseOp) -> SparseOp {
    let mut op = SparseOp {
        starts: vec![0],
        ..SparseOp::default()
    };
    let mut row: HashMap<u32, f64> = HashMap::new();
    for r in 0..a.starts.len() - 1 {
        row.clear();
        for k in a.starts[r]..a.starts[r + 1] {
            let mid = a.cols[k] as usize;
            for j in b.starts[mid]..b.starts[mid + 1] {
                *row.entry(b.cols[j]).or_insert(0.0) += a.weights[k] * b.weights[j];
            }
        }
        let mut entries: Vec<(u32, f64)> = row.iter().map(|(c, w)| (*c, *w)).collect();
        entries.sort_by_key(|e| e.0);
        for (c, w) in entries {
            op.cols.push(c);
            op.weights.push(w);
        }
        op.starts.push(op.cols.len());
    }
    op
}

/// Prefilter operators for levels `1..`, cached per base resolution.
/// Level `l` filters a box-downsampled copy of the base at twice its own
/// resolution, which keeps wide lobes from aliasing on small features.
/// Downsampled sources are read piecewise-constant so flux is preserved.
fn mip_filters(base_res: usize) -> FilterSet {
    static CACHE: OnceLock<Mutex<HashMap<usize, FilterSet>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(f) = cache.lock().unwrap().get(&base_res) {
        return f.clone();
    }
    let rough = level_roughness(level_count(base_res));
    let ops: Vec<SparseOp> = (1..rough.len())
        .map(|l| {
            let res = base_res >> l;
            let src = (2 * res).min(base_res);
            let filter = build_prefilter(src, res, base_res, rough[l], src != base_res);
            if src == base_res {
                filter
            } else {
                compose(&filter, &downsample_op(base_res, src))
            }
        })
        .collect();
    let ops = Arc::new(ops);
    cache
        .lock()
        .unwrap()
        .entry(base_res)
        .or_insert_with(|| ops.clone())
        .clone()
}

/// Resolution of the cached irradiance cube for a base resolution.
fn irradiance_res(base_res: usize) -> usize {
    base_res.clamp(8, 16)
}

/// Directions and solid angles of every texel of a grid.
fn texel_table(res: usize) -> Arc<Vec<([f64; 3], f64)>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<([f64; 3], f64)>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(res)
        .or_insert_with(|| {
            let mut out = Vec::with_capacity(FACES * res * res);
            for face in 0..FACES {
                for row in 0..res {
                    for col in 0..res {
                        out.push((texel_dir(res, face, col, row), texel_solid_angle(res, col, row)));
                    }
                }
            }
            Arc::new(out)
        })
        .clone()
}

/// `Σ E(ω_i) max(⟨ω_i, n⟩, 0) Δω_i` over the texels of `grid`.
pub fn irradiance_sum(grid: &CubeGrid, n: [f64; 3]) -> Rgb {
    let table = texel_table(grid.res);
    let mut out = [0.0; 3];
    for ((dir, sa), e) in table.iter().zip(&grid.data) {
        let c = v3::dot(*dir, n);
        if c > 0.0 {
            let w = c * sa;
            for k in 0..3 {
                out[k] += e[k] * w;
            }
        }
    }
    out
}

fn irradiance_cube(base: &CubeGrid) -> CubeGrid {
    let res = irradiance_res(base.res);
    let dirs: Vec<[f64; 3]> = texel_table(res).iter().map(|t| t.0).collect();
    CubeGrid {
        res,
        data: dirs.par_iter().map(|&n| irradiance_sum(base, n)).collect(),
    }
}

/// Adjoint of [`irradiance_cube`]: adds `∂/∂base` into `out`.
fn irradiance_cube_adjoint(base_res: usize, grad: &[Rgb], out: &mut [Rgb]) {
    let res = irradiance_res(base_res);
    let irr_dirs = texel_table(res);
    let base = texel_table(base_res);
    let active: Vec<(usize, Rgb)> = grad
        .iter()
        .enumerate()
        .filter(|(_, g)| **g != [0.0; 3])
        .map(|(i, g)| (i, *g))
        .collect();
    if active.is_empty() {
        return;
    }
    let contrib: Vec<Rgb> = base
        .par_iter()
        .map(|(dir, sa)| {
            let mut acc = [0.0; 3];
            for (i, g) in &active {
                let c = v3::dot(*dir, irr_dirs[*i].0);
                if c > 0.0 {
                    for k in 0..3 {
                        acc[k] += g[k] * c;
                    }
                }
            }
            [acc[0] * sa, acc[1] * sa, acc[2] * sa]
        })
        .collect();
    for (o, c) in out.iter_mut().zip(contrib) {
        for k in 0..3 {
            o[k] += c[k];
        }
    }
}

/// Environment cube map with its prefiltered mip chain and cached
/// irradiance. Level 0 holds `scale · activation(latents)`.
#[derive(Debug, Clone)]
pub struct EnvCubeMipmap {
    pub base_resolution: usize,
    /// Base-level latents; empty for maps built directly from radiance.
    pub latents: Vec<Rgb>,
    /// Radiance multiplier applied after activation.
    pub scale: f64,
    pub level_roughness: Vec<f64>,
    pub levels: Vec<CubeGrid>,
    pub irradiance: CubeGrid,
    filters: FilterSet,
}

impl PartialEq for EnvCubeMipmap {
    fn eq(&self, o: &Self) -> bool {
        self.base_resolution == o.base_resolution
            && self.latents == o.latents
            && self.scale == o.scale
            && self.levels == o.levels
    }
}

impl EnvCubeMipmap {
    fn check_res(res: usize) -> Result<()> {
        if res < 8 || !res.is_power_of_two() {
            return Err(Error::Config(format!(
                "environment resolution must be a power of two >= 8, got {res}"
            )));
        }
        Ok(())
    }

    /// Build from base-level latents.
    pub fn from_latents(res: usize, latents: Vec<Rgb>, scale: f64) -> Result<Self> {
        Self::check_res(res)?;
        if latents.len() != FACES * res * res {
            return Err(Error::mismatch(FACES * res * res, latents.len()));
        }
        if latents.iter().flatten().any(|x| !x.is_finite()) || !scale.is_finite() {
            return Err(Error::Numeric("non-finite environment latent".into()));
        }
        let base = CubeGrid {
            res,
            data: latents
                .iter()
                .map(|l| l.map(|x| env_activation(x) * scale))
                .collect(),
        };
        let mut env = Self::from_base(base);
        env.latents = latents;
        env.scale = scale;
        Ok(env)
    }

    /// Build from base-level radiance (no latents).
    pub fn from_radiance(base: CubeGrid) -> Result<Self> {
        Self::check_res(base.res)?;
        Ok(Self::from_base(base))
    }

    /// Constant radiance everywhere, stored as latents.
    pub fn constant(res: usize, radiance: Rgb) -> Result<Self> {
        let latent = radiance.map(env_activation_inverse);
        let mut env = Self::from_latents(res, vec![latent; FACES * res * res], 1.0)?;
        // activation round-trips are inexact; pin the radiance itself
        let base = CubeGrid::constant(res, radiance);
        let latents = std::mem::take(&mut env.latents);
        env = Self::from_base(base);
        env.latents = latents;
        Ok(env)
    }

    fn from_base(base: CubeGrid) -> Self {
        let res = base.res;
        let filters = mip_filters(res);
        let mut levels = Vec::with_capacity(filters.len() + 1);
        for (l, op) in filters.iter().enumerate() {
            levels.push(CubeGrid {
                res: res >> (l + 1),
                data: op.apply(&base.data),
            });
        }
        let irradiance = irradiance_cube(&base);
        levels.insert(0, base);
        Self {
            base_resolution: res,
            latents: Vec::new(),
            scale: 1.0,
            level_roughness: level_roughness(levels.len()),
            levels,
            irradiance,
            filters,
        }
    }

    /// Replace the latents and rebuild every derived level.
    pub fn set_latents(&mut self, latents: Vec<Rgb>) -> Result<()> {
        *self = Self::from_latents(self.base_resolution, latents, self.scale)?;
        Ok(())
    }

    /// The same latents with radiance multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        if self.latents.is_empty() {
            let base = CubeGrid {
                res: self.base_resolution,
                data: self.levels[0].data.iter().map(|v| v.map(|x| x * k)).collect(),
            };
            return Self::from_radiance(base);
        }
        Self::from_latents(self.base_resolution, self.latents.clone(), self.scale * k)
    }

    pub fn base(&self) -> &CubeGrid {
        &self.levels[0]
    }

    /// Bracketing levels and the blend weight of the upper one.
    #[inline]
    fn bracket<T: Real>(&self, roughness: T) -> (usize, T) {
        let rs = &self.level_roughness;
        let r = roughness.clamp_val(rs[0], rs[rs.len() - 1]);
        let rv = r.val();
        let mut k = 0;
        while k + 2 < rs.len() && rv >= rs[k + 1] {
            k += 1;
        }
        if rs.len() == 1 {
            return (0, T::cst(0.0));
        }
        (k, (r - rs[k]) / (rs[k + 1] - rs[k]))
    }

    /// Prefiltered radiance in direction `dir` at `roughness`.
    #[inline]
    pub fn sample<T: Real>(&self, dir: [T; 3], roughness: T) -> [T; 3] {
        let (k, t) = self.bracket(roughness);
        let lo = self.levels[k].sample(dir);
        if t.val() == 0.0 {
            return lo;
        }
        let hi = self.levels[k + 1].sample(dir);
        if t.val() == 1.0 {
            return hi;
        }
        [
            lo[0] + (hi[0] - lo[0]) * t,
            lo[1] + (hi[1] - lo[1]) * t,
            lo[2] + (hi[2] - lo[2]) * t,
        ]
    }

    /// Texels and weights read by [`Self::sample`], as `(level, texel, w)`.
    pub fn sample_footprint(&self, dir: [f64; 3], roughness: f64) -> Vec<(usize, usize, f64)> {
        let (k, t) = self.bracket(roughness);
        let mut out = Vec::with_capacity(8);
        let mut push = |level: usize, lw: f64| {
            for (i, w) in self.levels[level].footprint(dir) {
                out.push((level, i, w * lw));
            }
        };
        if t == 0.0 {
            push(k, 1.0);
        } else if t == 1.0 {
            push(k + 1, 1.0);
        } else {
            push(k, 1.0 - t);
            push(k + 1, t);
        }
        out
    }

    /// Cosine-weighted irradiance from the cached irradiance cube.
    #[inline]
    pub fn irradiance<T: Real>(&self, n: [T; 3]) -> [T; 3] {
        self.irradiance.sample(n)
    }

    /// Adjoint of everything derived from the base level. `level_grads`
    /// holds `∂L/∂level` per level, `irr_grad` `∂L/∂irradiance cube`;
    /// returns `∂L/∂base radiance`.
    pub fn base_radiance_gradient(&self, level_grads: &[Vec<Rgb>], irr_grad: &[Rgb]) -> Vec<Rgb> {
        let mut out = level_grads
            .first()
            .cloned()
            .unwrap_or_else(|| vec![[0.0; 3]; self.levels[0].texel_count()]);
        for (l, op) in self.filters.iter().enumerate() {
            if let Some(g) = level_grads.get(l + 1) {
                op.apply_transpose_add(g, &mut out);
            }
        }
        irradiance_cube_adjoint(self.base_resolution, irr_grad, &mut out);
        out
    }

    /// Chain a base-radiance gradient through scale and activation.
    pub fn latent_gradient(&self, base_grad: &[Rgb]) -> Vec<Rgb> {
        self.latents
            .iter()
            .zip(base_grad)
            .map(|(l, g)| {
                [
                    g[0] * self.scale * env_activation_grad(l[0]),
                    g[1] * self.scale * env_activation_grad(l[1]),
                    g[2] * self.scale * env_activation_grad(l[2]),
                ]
            })
            .collect()
    }

    /// Zeroed per-level gradient buffers matching this map.
    pub fn zero_level_grads(&self) -> Vec<Vec<Rgb>> {
        self.levels.iter().map(|l| vec![[0.0; 3]; l.texel_count()]).collect()
    }
}

/// Exact cosine-weighted irradiance over the base level.
pub fn diffuse_irradiance(env: &EnvCubeMipmap, n: [f64; 3]) -> Rgb {
    irradiance_sum(env.base(), n)
}

/// Split-sum table of `(τ0, τ1)` over `(cos θ, roughness)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSumLut {
    pub n_cos: usize,
    pub n_rough: usize,
    pub cos_min: f64,
    pub cos_max: f64,
    pub rough_min: f64,
    pub rough_max: f64,
    /// `(τ0, τ1)` per node, roughness-major.
    pub table: Vec<(f64, f64)>,
}

pub const LUT_SIZE: usize = 32;
pub const LUT_SAMPLES: usize = 4096;
const LUT_MAGIC: &[u8; 8] = b"PSLUT\0\0\x01";

/// Smith height-correlated masking-shadowing for GGX.
pub fn smith_g2(n_dot_v: f64, n_dot_l: f64, alpha: f64) -> f64 {
    let lambda = |c: f64| {
        let c2 = c * c;
        let tan2 = (1.0 - c2).max(0.0) / c2;
        0.5 * ((1.0 + alpha * alpha * tan2).sqrt() - 1.0)
    };
    1.0 / (1.0 + lambda(n_dot_v) + lambda(n_dot_l))
}

/// Monte Carlo `(τ0, τ1)` at one `(cos θ, roughness)` node.
pub fn integrate_split_sum(cos_v: f64, roughness: f64, samples: usize) -> (f64, f64) {
    let alpha = roughness * roughness;
    let v = [(1.0 - cos_v * cos_v).max(0.0).sqrt(), 0.0, cos_v];
    let (mut a, mut b) = (0.0, 0.0);
    for i in 0..samples {
        let h = ggx_sample(hammersley(i, samples), alpha);
        let vh = v3::dot(v, h);
        let l = [2.0 * vh * h[0] - v[0], 2.0 * vh * h[1] - v[1], 2.0 * vh * h[2] - v[2]];
        let (nl, nh) = (l[2], h[2]);
        if nl > 0.0 && vh > 0.0 {
            let g_vis = smith_g2(cos_v, nl, alpha) * vh / (nh * cos_v);
            let fc = (1.0 - vh).powi(5);
            a += (1.0 - fc) * g_vis;
            b += fc * g_vis;
        }
    }
    (a / samples as f64, b / samples as f64)
}

impl SplitSumLut {
    /// Integrate every node with `samples` GGX importance samples.
    pub fn precompute(samples: usize) -> Result<Self> {
        Self::precompute_sized(LUT_SIZE, LUT_SIZE, samples)
    }

    pub fn precompute_sized(n_cos: usize, n_rough: usize, samples: usize) -> Result<Self> {
        if samples < 1024 {
            return Err(Error::Config(format!(
                "split-sum table needs at least 1024 samples, got {samples}"
            )));
        }
        if n_cos < 2 || n_rough < 2 {
            return Err(Error::Config("split-sum table needs at least 2×2 nodes".into()));
        }
        let mut lut = Self {
            n_cos,
            n_rough,
            cos_min: 1e-3,
            cos_max: 1.0,
            rough_min: MIN_ROUGHNESS,
            rough_max: MAX_ROUGHNESS,
            table: Vec::new(),
        };
        lut.table = (0..n_cos * n_rough)
            .into_par_iter()
            .map(|k| {
                let (c, r) = lut.node(k % n_cos, k / n_cos);
                integrate_split_sum(c, r, samples)
            })
            .collect();
        Ok(lut)
    }

    /// Shared table at the default size and sample count.
    pub fn shared() -> Arc<SplitSumLut> {
        static LUT: OnceLock<Arc<SplitSumLut>> = OnceLock::new();
        LUT.get_or_init(|| Arc::new(Self::precompute(LUT_SAMPLES).expect("valid defaults")))
            .clone()
    }

    /// Coordinates of node `(i, j)`.
    pub fn node(&self, i: usize, j: usize) -> (f64, f64) {
        let c = self.cos_min + (self.cos_max - self.cos_min) * i as f64 / (self.n_cos - 1) as f64;
        let r = self.rough_min + (self.rough_max - self.rough_min) * j as f64 / (self.n_rough - 1) as f64;
        (c, r)
    }

    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        self.table[j * self.n_cos + i]
    }

    /// Bilinear lookup, clamped to the table range.
    #[inline]
    pub fn lookup<T: Real>(&self, cos_v: T, roughness: T) -> (T, T) {
        let cx = (cos_v.clamp_val(self.cos_min, self.cos_max) - self.cos_min)
            * ((self.n_cos - 1) as f64 / (self.cos_max - self.cos_min));
        let ry = (roughness.clamp_val(self.rough_min, self.rough_max) - self.rough_min)
            * ((self.n_rough - 1) as f64 / (self.rough_max - self.rough_min));
        let i0 = (cx.val().floor() as usize).min(self.n_cos - 2);
        let j0 = (ry.val().floor() as usize).min(self.n_rough - 2);
        let fx = cx - i0 as f64;
        let fy = ry - j0 as f64;
        let (a00, b00) = self.at(i0, j0);
        let (a10, b10) = self.at(i0 + 1, j0);
        let (a01, b01) = self.at(i0, j0 + 1);
        let (a11, b11) = self.at(i0 + 1, j0 + 1);
        let w00 = (-fx + 1.0) * (-fy + 1.0);
        let w10 = fx * (-fy + 1.0);
        let w01 = (-fx + 1.0) * fy;
        let w11 = fx * fy;
        (
            w00 * a00 + w10 * a10 + w01 * a01 + w11 * a11,
            w00 * b00 + w10 * b10 + w01 * b01 + w11 * b11,
        )
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(LUT_MAGIC)?;
        w.write_all(&(self.n_cos as u32).to_le_bytes())?;
        w.write_all(&(self.n_rough as u32).to_le_bytes())?;
        for v in [self.cos_min, self.cos_max, self.rough_min, self.rough_max] {
            w.write_all(&v.to_le_bytes())?;
        }
        for (a, b) in &self.table {
            w.write_all(&a.to_le_bytes())?;
            w.write_all(&b.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != LUT_MAGIC {
            return Err(Error::Format("not a split-sum table file".into()));
        }
        let mut u = [0u8; 4];
        r.read_exact(&mut u)?;
        let n_cos = u32::from_le_bytes(u) as usize;
        r.read_exact(&mut u)?;
        let n_rough = u32::from_le_bytes(u) as usize;
        if !(2..=4096).contains(&n_cos) || !(2..=4096).contains(&n_rough) {
            return Err(Error::Format("split-sum table dimensions out of range".into()));
        }
        let mut f = [0u8; 8];
        let mut next = |r: &mut dyn Read| -> Result<f64> {
            r.read_exact(&mut f)?;
            let v = f64::from_le_bytes(f);
            if !v.is_finite() {
                return Err(Error::Format("non-finite value in split-sum table".into()));
            }
            Ok(v)
        };
        let cos_min = next(r)?;
        let cos_max = next(r)?;
        let rough_min = next(r)?;
        let rough_max = next(r)?;
        let mut table = Vec::with_capacity(n_cos * n_rough);
        for _ in 0..n_cos * n_rough {
            let a = next(r)?;
            let b = next(r)?;
            table.push((a, b));
        }
        Ok(Self {
            n_cos,
            n_rough,
            cos_min,
            cos_max,
            rough_min,
            rough_max,
            table,
        })
    }
}
