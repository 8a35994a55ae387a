//! Image and normal-map quality metrics.

use crate::optim::ssim;
use crate::{Error, Result, Rgb};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB for images with unit peak, capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &[Rgb], b: &[Rgb]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::mismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(PSNR_CAP);
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| (0..3).map(|c| (x[c] - y[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (3 * a.len()) as f64;
    Ok(psnr_of_mse(mse))
}

pub fn psnr_of_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

/// Mean SSIM over the three channels.
pub fn ssim_rgb(a: &[Rgb], b: &[Rgb], width: usize, height: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::mismatch(a.len(), b.len()));
    }
    if a.len() != width * height {
        return Err(Error::mismatch(width * height, a.len()));
    }
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.iter().map(|p| p[c]).collect();
        let y: Vec<f64> = b.iter().map(|p| p[c]).collect();
        total += ssim(&x, &y, width, height)?;
    }
    Ok(total / 3.0)
}

/// Mean cosine distance `1 − n̂·n` and mean angular error in degrees over
/// pixels where `mask` ≥ 0.5 and both normals are nonzero.
pub fn normal_errors(est: &[[f64; 3]], reference: &[[f64; 3]], mask: &[f64]) -> Result<(f64, f64)> {
    if est.len() != reference.len() {
        return Err(Error::mismatch(reference.len(), est.len()));
    }
    if mask.len() != est.len() {
        return Err(Error::mismatch(est.len(), mask.len()));
    }
    let (mut cd, mut mae, mut n) = (0.0, 0.0, 0usize);
    for i in 0..est.len() {
        let (a, b) = (est[i], reference[i]);
        let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
        if mask[i] < 0.5 || na == 0.0 || nb == 0.0 {
            continue;
        }
        let cos = ((a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb)).clamp(-1.0, 1.0);
        cd += 1.0 - cos;
        mae += cos.acos().to_degrees();
        n += 1;
    }
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((cd / n as f64, mae / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn psnr_values() {
        let a = vec![[0.3; 3]; 16];
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b: Vec<Rgb> = a.iter().map(|p| p.map(|v| v + 0.1)).collect();
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
        assert!(psnr(&a, &b[..3]).is_err());
    }

    #[test]
    fn identical_normals_have_zero_error() {
        let n = vec![[0.0, 0.6, 0.8]; 9];
        let (cd, mae) = normal_errors(&n, &n, &[1.0; 9]).unwrap();
        assert_abs_diff_eq!(cd, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mae, 0.0, epsilon = 1e-6);
        let m = vec![[0.0, 0.0, 1.0]; 9];
        let o = vec![[1.0, 0.0, 0.0]; 9];
        let (cd, mae) = normal_errors(&m, &o, &[1.0; 9]).unwrap();
        assert_abs_diff_eq!(cd, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mae, 90.0, epsilon = 1e-9);
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a: Vec<Rgb> = (0..64).map(|i| [i as f64 / 64.0, 0.5, 0.1]).collect();
        assert_abs_diff_eq!(ssim_rgb(&a, &a, 8, 8).unwrap(), 1.0, epsilon = 1e-12);
    }
}
