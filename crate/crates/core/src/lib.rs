//! Panoramic capture to Gaussian-splat scene pipeline.
//!
//! The crate turns 360° walking captures into navigable 3D Gaussian scenes:
//!
//! * [`pano_geometry`]: equirect/sphere/pinhole mappings and crop rendering;
//! * [`capture_prep`]: clip chunking, loss masks and caption ingestion;
//! * [`masked_diffusion`]: a toy-scale masked denoising-diffusion trainer;
//! * [`synthetic_world`]: a procedural ground-truth room renderer;
//! * [`splat_recon`]: differentiable Gaussian splatting and reconstruction;
//! * [`eval_metrics`]: registration rates, PSNR and multi-view consistency;
//! * [`pipeline`]: the workspace-level orchestration behind the `pipeline` binary.

pub mod capture_prep;
pub mod eval_metrics;
pub mod masked_diffusion;
pub mod pano_geometry;
pub mod pipeline;
pub mod raster;
pub mod splat_recon;
pub mod synthetic_world;
