//! Feed-forward novel-view synthesis with pixel-aligned 3D Gaussians.
//!
//! Posed source images go through a feature pyramid with coordinate-guided
//! attention, a two-stage plane-sweep cost volume regresses depth, per-pixel
//! view tokens are fused by cross-dimensional attention, Gaussian attributes
//! are decoded (with cross-scale opacity modulation), and a tile rasterizer
//! renders the target view.

pub mod camera;
pub mod cda;
pub mod config;
pub mod cost_volume;
pub mod error;
pub mod fpn;
pub mod gaussians;
pub mod geometry;
pub mod gradcheck;
pub mod imageio;
pub mod kernels;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod scene;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
