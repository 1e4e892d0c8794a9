//! Monocular dynamic-scene Gaussian-splatting SLAM on the CPU.
//!
//! Module map:
//! - [`scene_model`]: poses, Gaussians, image grids.
//! - [`splat_renderer`]: differentiable alpha-composited splatting.
//! - [`mask_fusion`]: flow/depth dynamic masks fused by a per-pixel Bayes posterior.
//! - [`tracker`]: scale-corrected masked pose estimation, keyframes, local BA.
//! - [`mapper`]: masked photometric/depth losses and map optimization.
//! - [`dyn_sim`]: deterministic synthetic dynamic scenes and sensor emulation.
//! - [`io_eval`]: file formats, metrics, configuration and the CLI.
//! - [`pipeline`]: the two-stage tracking/mapping runner.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod scene_model;
pub mod mask_fusion;
pub mod splat_renderer;
pub mod tracker;
pub mod mapper;
pub mod dyn_sim;
pub mod io_eval;
pub mod pipeline;

pub use error::{Error, Result};
