//! Loss terms and their gradients.
//!
//! Every `*_grad` function returns the loss value together with the
//! gradient with respect to the rendered inputs.

use crate::{Error, Result, Rgb};

/// Weight of the L1 term in the RGB loss.
pub const RGB_L1_WEIGHT: f64 = 0.8;
/// SSIM window radius (11×11 window).
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Keeps the smoothness norm differentiable at zero.
const SMOOTH_EPS: f64 = 1e-12;

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::mismatch(expected, got));
    }
    Ok(())
}

fn ssim_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter with zero padding. The kernel is symmetric,
/// so this is also its own adjoint.
fn blur(img: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * img[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let yy = y as isize + t as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Mean SSIM of single-channel images (11×11 Gaussian window, σ = 1.5,
/// zero padding, C1 = 0.01², C2 = 0.03²).
pub fn ssim(x: &[f64], y: &[f64], w: usize, h: usize) -> Result<f64> {
    Ok(ssim_grad(x, y, w, h)?.0)
}

/// SSIM and its gradient with respect to `x`.
pub fn ssim_grad(x: &[f64], y: &[f64], w: usize, h: usize) -> Result<(f64, Vec<f64>)> {
    check_len(w * h, x.len())?;
    check_len(w * h, y.len())?;
    let n = (w * h) as f64;
    if w * h == 0 {
        return Ok((1.0, Vec::new()));
    }
    let k = ssim_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = blur(x, w, h, &k);
    let my = blur(y, w, h, &k);
    let exx = blur(&xx, w, h, &k);
    let eyy = blur(&yy, w, h, &k);
    let exy = blur(&xy, w, h, &k);
    let mut total = 0.0;
    let mut d_mx = vec![0.0; w * h];
    let mut d_exx = vec![0.0; w * h];
    let mut d_exy = vec![0.0; w * h];
    for i in 0..w * h {
        let (ux, uy) = (mx[i], my[i]);
        let sxx = exx[i] - ux * ux;
        let syy = eyy[i] - uy * uy;
        let sxy = exy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * sxy + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = sxx + syy + SSIM_C2;
        let m = a1 * a2 / (b1 * b2);
        total += m;
        let dm_ux = 2.0 * uy * a2 / (b1 * b2) - m * 2.0 * ux / b1;
        let dm_sxy = 2.0 * a1 / (b1 * b2);
        let dm_sxx = -m / b2;
        d_mx[i] = (dm_ux - 2.0 * ux * dm_sxx - uy * dm_sxy) / n;
        d_exx[i] = dm_sxx / n;
        d_exy[i] = dm_sxy / n;
    }
    let g_mx = blur(&d_mx, w, h, &k);
    let g_exx = blur(&d_exx, w, h, &k);
    let g_exy = blur(&d_exy, w, h, &k);
    let grad = (0..w * h)
        .map(|i| g_mx[i] + 2.0 * x[i] * g_exx[i] + y[i] * g_exy[i])
        .collect();
    Ok((total / n, grad))
}

fn channel(img: &[Rgb], c: usize) -> Vec<f64> {
    img.iter().map(|p| p[c]).collect()
}

/// Mean absolute difference over pixels and channels, with its gradient.
pub fn l1_grad(a: &[Rgb], b: &[Rgb]) -> Result<(f64, Vec<Rgb>)> {
    check_len(b.len(), a.len())?;
    if a.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = (3 * a.len()) as f64;
    let mut sum = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(p, q)| {
            [0, 1, 2].map(|c| {
                let d = p[c] - q[c];
                sum += d.abs();
                sign(d) / n
            })
        })
        .collect();
    Ok((sum / n, grad))
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `0.8·L1 + 0.2·(1 − SSIM)/2` on RGB images.
pub fn loss_rgb(s0: &[Rgb], gt: &[Rgb], w: usize, h: usize) -> Result<f64> {
    Ok(loss_rgb_grad(s0, gt, w, h)?.0)
}

pub fn loss_rgb_grad(s0: &[Rgb], gt: &[Rgb], w: usize, h: usize) -> Result<(f64, Vec<Rgb>)> {
    check_len(w * h, s0.len())?;
    let (l1, mut grad) = l1_grad(s0, gt)?;
    for g in grad.iter_mut() {
        *g = g.map(|v| v * RGB_L1_WEIGHT);
    }
    let mut ssim_mean = 0.0;
    let k = (1.0 - RGB_L1_WEIGHT) * 0.5 / 3.0;
    for c in 0..3 {
        let (s, gs) = ssim_grad(&channel(s0, c), &channel(gt, c), w, h)?;
        ssim_mean += s / 3.0;
        for (g, v) in grad.iter_mut().zip(gs) {
            g[c] -= k * v;
        }
    }
    let value = RGB_L1_WEIGHT * l1 + (1.0 - RGB_L1_WEIGHT) * (1.0 - ssim_mean) * 0.5;
    Ok((value, grad))
}

/// `L1(s1, ŝ1) + L1(s2, ŝ2)`.
pub fn loss_pol(s1: &[Rgb], s2: &[Rgb], gt1: &[Rgb], gt2: &[Rgb]) -> Result<f64> {
    Ok(loss_pol_grad(s1, s2, gt1, gt2)?.0)
}

pub fn loss_pol_grad(s1: &[Rgb], s2: &[Rgb], gt1: &[Rgb], gt2: &[Rgb]) -> Result<(f64, Vec<Rgb>, Vec<Rgb>)> {
    let (a, ga) = l1_grad(s1, gt1)?;
    let (b, gb) = l1_grad(s2, gt2)?;
    Ok((a + b, ga, gb))
}

/// `L1(M, O)`.
pub fn loss_mask(opacity: &[f64], mask: &[f64]) -> Result<f64> {
    Ok(loss_mask_grad(opacity, mask)?.0)
}

pub fn loss_mask_grad(opacity: &[f64], mask: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(mask.len(), opacity.len())?;
    if opacity.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = opacity.len() as f64;
    let mut sum = 0.0;
    let grad = opacity
        .iter()
        .zip(mask)
        .map(|(o, m)| {
            sum += (o - m).abs();
            sign(o - m) / n
        })
        .collect();
    Ok((sum / n, grad))
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Mean of `1 − ñ·n` over pixels where `mask` is set.
pub fn loss_depth_normal(normal: &[[f64; 3]], depth_normal: &[[f64; 3]], mask: &[bool]) -> Result<f64> {
    Ok(loss_depth_normal_grad(normal, depth_normal, mask)?.0)
}

/// Value and gradients with respect to `n` and `ñ`.
#[allow(clippy::type_complexity)]
pub fn loss_depth_normal_grad(
    normal: &[[f64; 3]],
    depth_normal: &[[f64; 3]],
    mask: &[bool],
) -> Result<(f64, Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    check_len(normal.len(), depth_normal.len())?;
    check_len(normal.len(), mask.len())?;
    let count = mask.iter().filter(|m| **m).count();
    let mut gn = vec![[0.0; 3]; normal.len()];
    let mut gd = vec![[0.0; 3]; normal.len()];
    if count == 0 {
        return Ok((0.0, gn, gd));
    }
    let k = 1.0 / count as f64;
    let mut sum = 0.0;
    for i in 0..normal.len() {
        if !mask[i] {
            continue;
        }
        sum += 1.0 - dot3(&normal[i], &depth_normal[i]);
        gn[i] = depth_normal[i].map(|v| -v * k);
        gd[i] = normal[i].map(|v| -v * k);
    }
    Ok((sum * k, gn, gd))
}

/// Per-pixel edge weight `exp(−‖∇ gray(ŝ0)‖)` from forward differences.
pub fn edge_weights(gt_s0: &[Rgb], w: usize, h: usize) -> Vec<f64> {
    let gray = |i: usize| (gt_s0[i][0] + gt_s0[i][1] + gt_s0[i][2]) / 3.0;
    let mut out = vec![0.0; w * h];
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let i = y * w + x;
            let gx = gray(i + 1) - gray(i);
            let gy = gray(i + w) - gray(i);
            out[i] = (-(gx * gx + gy * gy).sqrt()).exp();
        }
    }
    out
}

/// Mean of `‖∇n‖·exp(−‖∇ gray(ŝ0)‖)` over interior pixels whose right and
/// lower neighbors are also masked.
pub fn loss_smooth(normal: &[[f64; 3]], gt_s0: &[Rgb], mask: &[bool], w: usize, h: usize) -> Result<f64> {
    Ok(loss_smooth_grad(normal, gt_s0, mask, w, h)?.0)
}

pub fn loss_smooth_grad(
    normal: &[[f64; 3]],
    gt_s0: &[Rgb],
    mask: &[bool],
    w: usize,
    h: usize,
) -> Result<(f64, Vec<[f64; 3]>)> {
    check_len(w * h, normal.len())?;
    check_len(w * h, gt_s0.len())?;
    check_len(w * h, mask.len())?;
    let weights = edge_weights(gt_s0, w, h);
    let mut grad = vec![[0.0; 3]; w * h];
    let mut terms = Vec::new();
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let i = y * w + x;
            if mask[i] && mask[i + 1] && mask[i + w] {
                terms.push(i);
            }
        }
    }
    if terms.is_empty() {
        return Ok((0.0, grad));
    }
    let k = 1.0 / terms.len() as f64;
    let mut sum = 0.0;
    for &i in &terms {
        let dx = [0, 1, 2].map(|c| normal[i + 1][c] - normal[i][c]);
        let dy = [0, 1, 2].map(|c| normal[i + w][c] - normal[i][c]);
        let norm = (dot3(&dx, &dx) + dot3(&dy, &dy) + SMOOTH_EPS).sqrt();
        sum += norm * weights[i];
        let s = weights[i] * k / norm;
        for c in 0..3 {
            grad[i + 1][c] += s * dx[c];
            grad[i + w][c] += s * dy[c];
            grad[i][c] -= s * (dx[c] + dy[c]);
        }
    }
    Ok((sum * k, grad))
}

/// Intensity behind an ideal linear polarizer at `theta`.
#[inline]
pub fn lp_intensity(s0: f64, s1: f64, s2: f64, theta: f64) -> f64 {
    let (s, c) = (2.0 * theta).sin_cos();
    0.5 * (s0 + c * s1 + s * s2)
}

/// Gradients of the linear-polarizer capture loss.
#[derive(Debug, Clone)]
pub struct LpGrad {
    pub s0: Vec<Rgb>,
    pub s1: Vec<Rgb>,
    pub s2: Vec<Rgb>,
    pub theta: f64,
}

/// `mean |½(s0 + cos 2θ s1 + sin 2θ s2) − I|`.
pub fn loss_lp(s0: &[Rgb], s1: &[Rgb], s2: &[Rgb], theta: f64, captured: &[Rgb]) -> Result<f64> {
    Ok(loss_lp_grad(s0, s1, s2, theta, captured)?.0)
}

pub fn loss_lp_grad(s0: &[Rgb], s1: &[Rgb], s2: &[Rgb], theta: f64, captured: &[Rgb]) -> Result<(f64, LpGrad)> {
    check_len(captured.len(), s0.len())?;
    check_len(captured.len(), s1.len())?;
    check_len(captured.len(), s2.len())?;
    let m = captured.len();
    let mut g = LpGrad {
        s0: vec![[0.0; 3]; m],
        s1: vec![[0.0; 3]; m],
        s2: vec![[0.0; 3]; m],
        theta: 0.0,
    };
    if m == 0 {
        return Ok((0.0, g));
    }
    let (sn, cs) = (2.0 * theta).sin_cos();
    let n = (3 * m) as f64;
    let mut sum = 0.0;
    for i in 0..m {
        for c in 0..3 {
            let pred = lp_intensity(s0[i][c], s1[i][c], s2[i][c], theta);
            let d = pred - captured[i][c];
            sum += d.abs();
            let gi = sign(d) / n;
            g.s0[i][c] = 0.5 * gi;
            g.s1[i][c] = 0.5 * cs * gi;
            g.s2[i][c] = 0.5 * sn * gi;
            g.theta += gi * (-sn * s1[i][c] + cs * s2[i][c]);
        }
    }
    Ok((sum / n, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct 2D-window SSIM with zero padding.
    fn ssim_reference(x: &[f64], y: &[f64], w: usize, h: usize) -> f64 {
        let r = 5i64;
        let g1: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / 4.5).exp()).collect();
        let s: f64 = g1.iter().sum();
        let mut total = 0.0;
        for py in 0..h as i64 {
            for px in 0..w as i64 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (qx, qy) = (px + dx, py + dy);
                        if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                            continue;
                        }
                        let wt = g1[(dx + r) as usize] * g1[(dy + r) as usize] / (s * s);
                        let i = (qy * w as i64 + qx) as usize;
                        mx += wt * x[i];
                        my += wt * y[i];
                        xx += wt * x[i] * x[i];
                        yy += wt * y[i] * y[i];
                        xy += wt * x[i] * y[i];
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                total += ((2.0 * mx * my + c1) * (2.0 * (xy - mx * my) + c2))
                    / ((mx * mx + my * my + c1) * ((xx - mx * mx) + (yy - my * my) + c2));
            }
        }
        total / (w * h) as f64
    }

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn ssim_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (w, h) in [(13, 9), (20, 20), (4, 7)] {
            let x = random_image(&mut rng, w * h);
            let y = random_image(&mut rng, w * h);
            assert_abs_diff_eq!(ssim(&x, &y, w, h).unwrap(), ssim_reference(&x, &y, w, h), epsilon = 1e-6);
            assert_abs_diff_eq!(ssim(&x, &x, w, h).unwrap(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ssim_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (w, h) = (9, 8);
        let x = random_image(&mut rng, w * h);
        let y = random_image(&mut rng, w * h);
        let (_, g) = ssim_grad(&x, &y, w, h).unwrap();
        for i in [0, 10, 37, 71] {
            let eps = 1e-6;
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (ssim(&xp, &y, w, h).unwrap() - ssim(&xm, &y, w, h).unwrap()) / (2.0 * eps);
            assert_abs_diff_eq!(g[i], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn rgb_loss_values() {
        let a = vec![[0.4; 3]; 36];
        assert_abs_diff_eq!(loss_rgb(&a, &a, 6, 6).unwrap(), 0.0, epsilon = 1e-12);
        let b: Vec<Rgb> = a.iter().map(|p| p.map(|v| v + 0.1)).collect();
        let (l1, _) = l1_grad(&b, &a).unwrap();
        assert_abs_diff_eq!(l1, 0.1, epsilon = 1e-12);
        let ds: f64 = (0..3)
            .map(|c| (1.0 - ssim(&channel(&b, c), &channel(&a, c), 6, 6).unwrap()) / 2.0)
            .sum::<f64>()
            / 3.0;
        assert_abs_diff_eq!(loss_rgb(&b, &a, 6, 6).unwrap(), 0.8 * 0.1 + 0.2 * ds, epsilon = 1e-12);
        assert!(loss_rgb(&b, &a[..5], 6, 6).is_err());
    }

    #[test]
    fn pol_and_mask_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s1: Vec<Rgb> = (0..10).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let s2: Vec<Rgb> = (0..10).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        assert_eq!(loss_pol(&s1, &s2, &s1, &s2).unwrap(), 0.0);
        let off: Vec<Rgb> = s1.iter().map(|p| p.map(|v| v + 0.1)).collect();
        assert_abs_diff_eq!(loss_pol(&off, &s2, &s1, &s2).unwrap(), 0.1, epsilon = 1e-12);
        let direct: f64 = (0..10)
            .map(|i| (0..3).map(|c| (s1[i][c] - s2[i][c]).abs() + (s2[i][c] - s1[i][c]).abs()).sum::<f64>())
            .sum::<f64>()
            / 30.0;
        assert_abs_diff_eq!(loss_pol(&s1, &s2, &s2, &s1).unwrap(), direct, epsilon = 1e-12);

        assert_eq!(loss_mask(&[1.0; 5], &[0.0; 5]).unwrap(), 1.0);
        let o: Vec<f64> = (0..10).map(|_| rng.gen()).collect();
        let m: Vec<f64> = (0..10).map(|_| rng.gen()).collect();
        let direct: f64 = o.iter().zip(&m).map(|(a, b)| (a - b).abs()).sum::<f64>() / 10.0;
        assert_abs_diff_eq!(loss_mask(&o, &m).unwrap(), direct, epsilon = 1e-12);
        assert_eq!(loss_mask(&o, &o).unwrap(), 0.0);
    }

    #[test]
    fn depth_normal_loss_values() {
        let n = vec![[0.0, 0.0, 1.0]; 4];
        let anti = vec![[0.0, 0.0, -1.0]; 4];
        let orth = vec![[1.0, 0.0, 0.0]; 4];
        let m = vec![true; 4];
        assert_eq!(loss_depth_normal(&n, &n, &m).unwrap(), 0.0);
        assert_eq!(loss_depth_normal(&n, &anti, &m).unwrap(), 2.0);
        assert_eq!(loss_depth_normal(&n, &orth, &m).unwrap(), 1.0);
        assert_eq!(loss_depth_normal(&n, &anti, &[false; 4]).unwrap(), 0.0);
    }

    #[test]
    fn smooth_loss_values() {
        let (w, h) = (6, 5);
        let m = vec![true; w * h];
        let flat = vec![[0.5; 3]; w * h];
        let n = vec![[0.0, 0.0, 1.0]; w * h];
        assert_eq!(loss_smooth(&n, &flat, &m, w, h).unwrap(), loss_smooth(&n, &flat, &m, w, h).unwrap());
        assert!(loss_smooth(&n, &flat, &m, w, h).unwrap() < 1e-5);
        // normal discontinuity at x = 3
        let step_n: Vec<[f64; 3]> = (0..w * h)
            .map(|i| if i % w >= 3 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] })
            .collect();
        let plain = loss_smooth(&step_n, &flat, &m, w, h).unwrap();
        let mean_grad = {
            let mut s = 0.0;
            let mut k = 0;
            for y in 0..h - 1 {
                for x in 0..w - 1 {
                    let i = y * w + x;
                    let d = |a: [f64; 3], b: [f64; 3]| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
                    s += (d(step_n[i + 1], step_n[i]) + d(step_n[i + w], step_n[i])).sqrt();
                    k += 1;
                }
            }
            s / k as f64
        };
        assert_abs_diff_eq!(plain, mean_grad, epsilon = 1e-6);
        let step_img: Vec<Rgb> = (0..w * h).map(|i| if i % w >= 3 { [1.0; 3] } else { [0.0; 3] }).collect();
        assert!(loss_smooth(&step_n, &step_img, &m, w, h).unwrap() < plain);
    }

    #[test]
    fn smooth_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (w, h) = (5, 4);
        let n: Vec<[f64; 3]> = (0..w * h).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let img: Vec<Rgb> = (0..w * h).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let m: Vec<bool> = (0..w * h).map(|i| i != 7).collect();
        let (_, g) = loss_smooth_grad(&n, &img, &m, w, h).unwrap();
        for i in [0, 6, 12, 18] {
            for c in 0..3 {
                let eps = 1e-6;
                let mut p = n.clone();
                p[i][c] += eps;
                let mut q = n.clone();
                q[i][c] -= eps;
                let fd = (loss_smooth(&p, &img, &m, w, h).unwrap() - loss_smooth(&q, &img, &m, w, h).unwrap()) / (2.0 * eps);
                assert_abs_diff_eq!(g[i][c], fd, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn lp_loss_and_angle_gradient() {
        let s0 = vec![[1.0, 0.8, 0.6]; 4];
        let s1 = vec![[0.3, -0.2, 0.1]; 4];
        let s2 = vec![[-0.1, 0.2, 0.25]; 4];
        let theta = 0.4;
        let cap: Vec<Rgb> = s0
            .iter()
            .zip(&s1)
            .zip(&s2)
            .map(|((a, b), c)| [0, 1, 2].map(|k| lp_intensity(a[k], b[k], c[k], theta)))
            .collect();
        assert_abs_diff_eq!(loss_lp(&s0, &s1, &s2, theta, &cap).unwrap(), 0.0, epsilon = 1e-15);
        let t = 0.55;
        let (_, g) = loss_lp_grad(&s0, &s1, &s2, t, &cap).unwrap();
        let eps = 1e-6;
        let fd = (loss_lp(&s0, &s1, &s2, t + eps, &cap).unwrap() - loss_lp(&s0, &s1, &s2, t - eps, &cap).unwrap()) / (2.0 * eps);
        assert_abs_diff_eq!(g.theta, fd, epsilon = 1e-7);
    }
}
