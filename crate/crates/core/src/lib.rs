//! Polarimetric deferred rendering and inverse rendering of glossy dielectric
//! objects represented as 2D Gaussian surfels.
//!
//! The crate is organised bottom-up:
//!
//! - [`polcore`]: Stokes vectors, Mueller matrices, Fresnel coefficients and
//!   the polarization factors used by shading.
//! - [`surfel`]: surfel primitives, cameras, ray-splat intersection and the
//!   alpha-blended G-buffer rasterizer.
//! - [`envlight`]: environment cube mipmaps, the split-sum lookup table and
//!   diffuse irradiance.
//! - [`polardr`]: per-pixel polarimetric deferred shading into Stokes images.
//! - [`gridmap`]: anchor-local cubemaps for self-occlusion-aware lighting.
//! - [`optim`]: losses, parameter activations, analytic gradients and the
//!   training loop.
//! - [`toolkit`]: file formats, metrics, synthetic scenes and bundles.

pub mod dual;
pub mod envlight;
pub mod error;
pub mod gridmap;
pub mod optim;
pub mod polardr;
pub mod polcore;
pub mod surfel;
pub mod toolkit;

pub use error::{Error, Result};

/// Linear RGB triple.
pub type Rgb = [f64; 3];
