//! File formats, metrics, synthetic scenes and scene bundles.

pub mod bundle;
pub mod image_file;
pub mod metrics;
pub mod synth;

pub use bundle::SceneBundle;
pub use image_file::{load_env, load_stokes, save_env, save_stokes, FloatImage};
