//! Stokes/Mueller algebra and dielectric Fresnel coefficients.
//!
//! Frame convention: Stokes vectors are expressed in the camera frame with
//! `s1 > 0` meaning linear polarization aligned with the camera's `+y` axis
//! projection, and `s2 > 0` the polarization rotated by +45° from `+y`
//! toward `+x`. [`mueller_rotation`] rotates that frame by `phi`, so a
//! state `[1, b, 0, 0]` expressed in a frame turned by `phi` becomes
//! `[1, b cos 2phi, -b sin 2phi, 0]`, the form used by the shading code.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::dual::Real;
use crate::{Error, Result, Rgb};

/// Linear-polarization state of RGB radiance.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpectralStokes {
    pub s0: Rgb,
    pub s1: Rgb,
    pub s2: Rgb,
    pub s3: Rgb,
}

impl SpectralStokes {
    pub const ZERO: Self = Self {
        s0: [0.0; 3],
        s1: [0.0; 3],
        s2: [0.0; 3],
        s3: [0.0; 3],
    };

    pub fn unpolarized(radiance: Rgb) -> Self {
        Self {
            s0: radiance,
            ..Self::ZERO
        }
    }

    /// `[L, beta cos 2phi L, -beta sin 2phi L, 0]` per channel.
    pub fn linear(radiance: Rgb, beta: f64, cos2phi: f64, sin2phi: f64) -> Self {
        let mut out = Self::ZERO;
        for c in 0..3 {
            out.s0[c] = radiance[c];
            out.s1[c] = beta * cos2phi * radiance[c];
            out.s2[c] = -beta * sin2phi * radiance[c];
        }
        out
    }

    pub fn channel(&self, c: usize) -> Vector4<f64> {
        Vector4::new(self.s0[c], self.s1[c], self.s2[c], self.s3[c])
    }

    pub fn set_channel(&mut self, c: usize, v: &Vector4<f64>) {
        self.s0[c] = v[0];
        self.s1[c] = v[1];
        self.s2[c] = v[2];
        self.s3[c] = v[3];
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut out = *self;
        for c in 0..3 {
            out.s0[c] += o.s0[c];
            out.s1[c] += o.s1[c];
            out.s2[c] += o.s2[c];
            out.s3[c] += o.s3[c];
        }
        out
    }

    pub fn scale(&self, k: f64) -> Self {
        let mut out = *self;
        for c in 0..3 {
            out.s0[c] *= k;
            out.s1[c] *= k;
            out.s2[c] *= k;
            out.s3[c] *= k;
        }
        out
    }

    /// Nonnegative intensity and DoP ≤ 1 (within `eps`) on every channel.
    pub fn is_physical(&self, eps: f64) -> bool {
        (0..3).all(|c| {
            let pol = (self.s1[c].powi(2) + self.s2[c].powi(2) + self.s3[c].powi(2)).sqrt();
            self.s0[c] >= -eps && pol <= self.s0[c] + eps
        })
    }
}

/// 4×4 Mueller matrix acting on `[s0, s1, s2, s3]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuellerMatrix(pub Matrix4<f64>);

/// Phase retardation between perpendicular and parallel waves; only the two
/// dielectric cases occur.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retardation {
    InPhase,
    HalfWave,
}

impl Retardation {
    fn cos(self) -> f64 {
        match self {
            Retardation::InPhase => 1.0,
            Retardation::HalfWave => -1.0,
        }
    }
}

impl MuellerMatrix {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    pub fn mul(&self, o: &MuellerMatrix) -> MuellerMatrix {
        MuellerMatrix(self.0 * o.0)
    }

    /// Fresnel reflection or transmission matrix built from a pair of power
    /// coefficients (`perp`, `par`).
    pub fn fresnel(perp: f64, par: f64, delta: Retardation) -> Self {
        let plus = 0.5 * (perp + par);
        let minus = 0.5 * (perp - par);
        let cross = (perp * par).sqrt();
        // sin(delta) is zero for both admissible retardations
        let c = cross * delta.cos();
        Self(Matrix4::new(
            plus, minus, 0.0, 0.0, //
            minus, plus, 0.0, 0.0, //
            0.0, 0.0, c, 0.0, //
            0.0, 0.0, 0.0, c,
        ))
    }
}

/// Ideal linear polarizer with transmission axis at `theta` radians.
pub fn mueller_lp(theta: f64) -> MuellerMatrix {
    let (s, c) = (2.0 * theta).sin_cos();
    MuellerMatrix(
        Matrix4::new(
            1.0,
            c,
            s,
            0.0,
            c,
            c * c,
            c * s,
            0.0,
            s,
            c * s,
            s * s,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
        ) * 0.5,
    )
}

/// Rotation of the Stokes reference frame by `phi`.
pub fn mueller_rotation(phi: f64) -> MuellerMatrix {
    let (s, c) = (2.0 * phi).sin_cos();
    MuellerMatrix(Matrix4::new(
        1.0, 0.0, 0.0, 0.0, //
        0.0, c, s, 0.0, //
        0.0, -s, c, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    ))
}

pub fn apply_mueller(m: &MuellerMatrix, s: &SpectralStokes) -> SpectralStokes {
    let mut out = SpectralStokes::ZERO;
    for c in 0..3 {
        out.set_channel(c, &(m.0 * s.channel(c)));
    }
    out
}

/// Degree and angle of polarization per channel. A channel with zero
/// intensity reports `(0, 0)`.
pub fn dop_aop(s: &SpectralStokes) -> ([f64; 3], [f64; 3]) {
    let mut dop = [0.0; 3];
    let mut aop = [0.0; 3];
    for c in 0..3 {
        if s.s0[c] > 0.0 {
            dop[c] = (s.s1[c].powi(2) + s.s2[c].powi(2)).sqrt() / s.s0[c];
            aop[c] = 0.5 * s.s2[c].atan2(s.s1[c]);
        }
    }
    (dop, aop)
}

/// Fresnel power coefficients for light entering a dielectric from air.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FresnelSet {
    pub t_perp: f64,
    pub t_par: f64,
    pub r_perp: f64,
    pub r_par: f64,
    pub cos_theta1: f64,
    pub cos_theta2: f64,
    pub eta1: f64,
    pub eta2: f64,
}

impl FresnelSet {
    /// Left side of the energy identity `(eta2 cos2)/(eta1 cos1) T + R` for
    /// the (perpendicular, parallel) waves; both equal one.
    pub fn energy_balance(&self) -> (f64, f64) {
        let k = (self.eta2 * self.cos_theta2) / (self.eta1 * self.cos_theta1);
        (k * self.t_perp + self.r_perp, k * self.t_par + self.r_par)
    }
}

/// Generic Fresnel evaluation shared with the differentiable shading path.
/// `cos1` must lie in (0, 1].
#[derive(Debug, Clone, Copy)]
pub struct FresnelTerms<T> {
    pub t_perp: T,
    pub t_par: T,
    pub r_perp: T,
    pub r_par: T,
    pub cos2: T,
}

pub fn fresnel_terms<T: Real>(eta: T, cos1: T) -> FresnelTerms<T> {
    let sin2_1 = (-(cos1 * cos1) + 1.0).clamp_val(0.0, 1.0);
    let cos2 = (-(sin2_1 / (eta * eta)) + 1.0).sqrt();
    let a = cos1 + eta * cos2; // eta1 cos1 + eta2 cos2
    let b = cos2 + eta * cos1; // eta1 cos2 + eta2 cos1
    let t_perp = (cos1 * 2.0 / a).powi(2);
    let t_par = (cos1 * 2.0 / b).powi(2);
    let r_perp = ((cos1 - eta * cos2) / a).powi(2);
    let r_par = ((cos2 - eta * cos1) / b).powi(2);
    FresnelTerms {
        t_perp,
        t_par,
        r_perp,
        r_par,
        cos2,
    }
}

/// Fresnel coefficients at an air/dielectric interface with IoR `eta`.
pub fn fresnel(eta: f64, cos_theta1: f64) -> Result<FresnelSet> {
    if !(cos_theta1 > 0.0) {
        return Err(Error::Domain(format!(
            "back-facing incidence: cos(theta1) = {cos_theta1}"
        )));
    }
    if !(eta >= 1.0) || !eta.is_finite() {
        return Err(Error::Domain(format!("IoR must be >= 1, got {eta}")));
    }
    let cos1 = cos_theta1.min(1.0);
    let t = fresnel_terms(eta, cos1);
    Ok(FresnelSet {
        t_perp: t.t_perp,
        t_par: t.t_par,
        r_perp: t.r_perp,
        r_par: t.r_par,
        cos_theta1: cos1,
        cos_theta2: t.cos2,
        eta1: 1.0,
        eta2: eta,
    })
}

/// `(R⊥ − R∥)/(R⊥ + R∥)`, zero when nothing is reflected.
pub fn beta_spec_of<T: Real>(r_perp: T, r_par: T) -> T {
    let den = r_perp + r_par;
    if den.val() <= 0.0 {
        T::cst(0.0)
    } else {
        (r_perp - r_par) / den
    }
}

/// `(T⊥ − T∥)/(T⊥ + T∥)`, zero when nothing is transmitted.
pub fn beta_diff_of<T: Real>(t_perp: T, t_par: T) -> T {
    let den = t_perp + t_par;
    if den.val() <= 0.0 {
        T::cst(0.0)
    } else {
        (t_perp - t_par) / den
    }
}

pub fn beta_spec(f: &FresnelSet) -> f64 {
    beta_spec_of(f.r_perp, f.r_par)
}

pub fn beta_diff(f: &FresnelSet) -> f64 {
    beta_diff_of(f.t_perp, f.t_par)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    #[test]
    fn normal_incidence_glass() {
        let f = fresnel(1.5, 1.0).unwrap();
        assert_abs_diff_eq!(f.r_perp, 0.04, epsilon = 1e-15);
        assert_abs_diff_eq!(f.r_par, 0.04, epsilon = 1e-15);
        assert_abs_diff_eq!(f.t_perp, 0.64, epsilon = 1e-15);
        assert_abs_diff_eq!(f.t_par, 0.64, epsilon = 1e-15);
        assert_abs_diff_eq!(1.5 * 0.64 + 0.04, 1.0, epsilon = 1e-15);
        assert_eq!(beta_spec(&f), 0.0);
        assert_eq!(beta_diff(&f), 0.0);
    }

    #[test]
    fn grazing_limit() {
        let f = fresnel(1.5, 1e-9).unwrap();
        assert!(f.r_perp > 0.999_99 && f.r_par > 0.999_99);
        assert!(f.t_perp < 1e-8 && f.t_par < 1e-8);
        assert!(beta_spec(&f).abs() < 1e-6);
        // T⊥/T∥ → 1/η², so βd → (1 − η²)/(1 + η²)
        assert_abs_diff_eq!(beta_diff(&f), (1.0 - 2.25) / (1.0 + 2.25), epsilon = 1e-6);
    }

    #[test]
    fn brewster_angle_kills_parallel_reflection() {
        let theta_b = 1.5f64.atan();
        let f = fresnel(1.5, theta_b.cos()).unwrap();
        assert!(f.r_par < 1e-20);
        assert_abs_diff_eq!(beta_spec(&f), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn diffuse_polarization_is_weaker() {
        let f = fresnel(1.5, (60f64).to_radians().cos()).unwrap();
        let bd = beta_diff(&f);
        assert!(bd < 0.0);
        assert!(bd.abs() < beta_spec(&f));
    }

    #[test]
    fn back_facing_is_rejected() {
        assert!(matches!(fresnel(1.5, 0.0), Err(Error::Domain(_))));
        assert!(matches!(fresnel(1.5, -0.2), Err(Error::Domain(_))));
    }

    #[test]
    fn polarizer_matrix_at_zero() {
        let m = mueller_lp(0.0).0;
        let expected = Matrix4::new(
            0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        );
        assert_abs_diff_eq!(m, expected, epsilon = 1e-16);
        let out = apply_mueller(&mueller_lp(0.0), &SpectralStokes::unpolarized([1.0; 3]));
        assert_eq!(out.s0, [0.5; 3]);
        assert_eq!(out.s1, [0.5; 3]);
        assert_eq!(out.s2, [0.0; 3]);
    }

    #[test]
    fn rotation_convention() {
        let r = mueller_rotation(FRAC_PI_4);
        let s = apply_mueller(&r, &SpectralStokes::linear([1.0; 3], 1.0, 1.0, 0.0));
        assert_abs_diff_eq!(s.s0[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.s1[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.s2[0], -1.0, epsilon = 1e-15);
        let id = mueller_rotation(0.7).mul(&mueller_rotation(-0.7)).0;
        assert_abs_diff_eq!(id, Matrix4::identity(), epsilon = 1e-15);
        assert_eq!(mueller_rotation(0.0).0, Matrix4::identity());
    }

    #[test]
    fn rotated_frame_matches_shading_form() {
        // [1, b, 0, 0] in a frame turned by phi becomes [1, b cos2φ, −b sin2φ, 0]
        let (b, phi) = (0.37, 0.41);
        let s = apply_mueller(
            &mueller_rotation(phi),
            &SpectralStokes::linear([2.0; 3], b, 1.0, 0.0),
        );
        let t = SpectralStokes::linear([2.0; 3], b, (2.0 * phi).cos(), (2.0 * phi).sin());
        for c in 0..3 {
            assert_abs_diff_eq!(s.s1[c], t.s1[c], epsilon = 1e-15);
            assert_abs_diff_eq!(s.s2[c], t.s2[c], epsilon = 1e-15);
        }
    }

    #[test]
    fn malus_law() {
        let unpol = SpectralStokes::unpolarized([1.0; 3]);
        let after0 = apply_mueller(&mueller_lp(0.0), &unpol);
        for k in 0..16 {
            let theta = k as f64 * PI / 16.0;
            let out = apply_mueller(&mueller_lp(theta), &after0);
            assert_abs_diff_eq!(out.s0[1], after0.s0[1] * theta.cos().powi(2), epsilon = 1e-12);
        }
    }

    #[test]
    fn dop_aop_examples() {
        let (d, a) = dop_aop(&SpectralStokes::unpolarized([1.0; 3]));
        assert_eq!(d, [0.0; 3]);
        assert_eq!(a, [0.0; 3]);
        let (d, a) = dop_aop(&SpectralStokes::linear([1.0; 3], 1.0, 1.0, 0.0));
        assert_eq!(d, [1.0; 3]);
        assert_eq!(a, [0.0; 3]);
        let s = SpectralStokes {
            s0: [2.0; 3],
            s2: [-2.0; 3],
            ..SpectralStokes::ZERO
        };
        let (d, a) = dop_aop(&s);
        assert_abs_diff_eq!(d[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a[0], -FRAC_PI_4, epsilon = 1e-15);
        let (d, a) = dop_aop(&SpectralStokes::ZERO);
        assert_eq!((d, a), ([0.0; 3], [0.0; 3]));
    }

    #[test]
    fn fresnel_mueller_reflection_of_unpolarized_light() {
        let f = fresnel(1.5, 0.5).unwrap();
        let m = MuellerMatrix::fresnel(f.r_perp, f.r_par, Retardation::HalfWave);
        let out = apply_mueller(&m, &SpectralStokes::unpolarized([1.0; 3]));
        let (dop, _) = dop_aop(&out);
        assert_abs_diff_eq!(dop[0], beta_spec(&f), epsilon = 1e-14);
        assert!(out.is_physical(1e-12));
    }

    proptest! {
        #[test]
        fn energy_identity_and_beta_signs(eta in 1.3f64..2.3, deg in 0.0f64..89.9) {
            let f = fresnel(eta, deg.to_radians().cos()).unwrap();
            let (p, q) = f.energy_balance();
            prop_assert!((p - 1.0).abs() < 1e-9);
            prop_assert!((q - 1.0).abs() < 1e-9);
            prop_assert!(f.r_perp >= f.r_par - 1e-15);
            prop_assert!(f.t_par >= f.t_perp - 1e-15);
            prop_assert!((0.0..=1.0).contains(&f.r_perp) && (0.0..=1.0).contains(&f.r_par));
            prop_assert!(beta_spec(&f) >= 0.0 && beta_spec(&f) <= 1.0);
            prop_assert!(beta_diff(&f) <= 0.0 && beta_diff(&f) >= -1.0);
        }

        #[test]
        fn polarizer_idempotent_and_crossed(theta in -10.0f64..10.0,
                                            s1 in -1.0f64..1.0, s2 in -1.0f64..1.0) {
            let m = mueller_lp(theta);
            let mm = m.mul(&m);
            prop_assert!((mm.0 - m.0).abs().max() < 1e-12);
            let s0 = (s1 * s1 + s2 * s2).sqrt() + 0.1;
            let s = SpectralStokes { s0: [s0; 3], s1: [s1; 3], s2: [s2; 3], s3: [0.0; 3] };
            let out = apply_mueller(&mueller_lp(theta + FRAC_PI_2).mul(&m), &s);
            prop_assert!(out.s0[0].abs() < 1e-12);
        }
    }
}
