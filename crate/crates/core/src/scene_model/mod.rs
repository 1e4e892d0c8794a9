//! Geometric and scene value types shared across the pipeline.

mod camera;
mod gaussian;
mod image;
mod se3;

pub use camera::CameraIntrinsics;
pub use gaussian::{covariance_3d, Gaussian, GaussianId, GaussianMap, KeyframeId};
pub use image::{
    count_set, depth_is_valid, sample_depth_bilinear, ColorImage, DepthImage, FlowField,
    FusedMask, Grid, MaskImage,
};
pub use se3::{hat, orthonormalize, quat_to_matrix, so3_exp, SE3Pose};

use crate::error::{check_shape, Error, Result};

/// One observation. `flow_to_next` maps pixels of this frame into the next one.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub color: ColorImage,
    pub est_depth: Option<DepthImage>,
    pub flow_to_next: Option<FlowField>,
    pub is_keyframe: bool,
}

impl Frame {
    pub fn new(index: usize, timestamp: f64, color: ColorImage) -> Self {
        Self {
            index,
            timestamp,
            color,
            est_depth: None,
            flow_to_next: None,
            is_keyframe: false,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.color.dims()
    }

    pub fn validate(&self, k: &CameraIntrinsics) -> Result<()> {
        check_shape(k.dims(), self.color.dims())?;
        if let Some(d) = &self.est_depth {
            check_shape(k.dims(), d.dims())?;
            if d.data().iter().any(|v| v.is_nan() || *v < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "frame {} has negative or NaN depth",
                    self.index
                )));
            }
        }
        if let Some(f) = &self.flow_to_next {
            check_shape(k.dims(), f.dims())?;
            if f.data().iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
                return Err(Error::InvalidInput(format!(
                    "frame {} has non-finite flow",
                    self.index
                )));
            }
        }
        Ok(())
    }
}
