//! Camera-aware scene reconstruction and the numerical core of pose-aware
//! video inpainting.

pub mod camera;
pub mod cli;
pub mod degrade;
pub mod error;
pub mod gated_latent;
pub mod gaussian_field;
pub mod inpaint_bridge;
pub mod metrics;
pub mod pose_mask;
pub mod raster;
pub mod rgbd_warp;
pub mod scene_pipeline;
pub mod splat_render;

pub use error::{Error, Result};
