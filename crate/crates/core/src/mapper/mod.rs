//! Map maintenance: Gaussian insertion from keyframes, pruning of Gaussians
//! that land on moving objects, and masked photometric/depth optimization.

mod io;
mod loss;
mod optim;

pub use io::{map_from_str, map_to_string, read_map, write_map};
pub use loss::{
    depth_loss, depth_loss_grad, map_loss, photometric_loss, photometric_loss_grad,
    MaskedLossWeights,
};
pub use optim::{optimize_map, packet_loss, LearningRates, OptimizeConfig, OptimizeReport};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::scene_model::{
    depth_is_valid, CameraIntrinsics, DepthImage, Frame, FusedMask, Gaussian, GaussianMap, SE3Pose,
};
use crate::splat_renderer::{composite_pixel, Rasterization, RenderConfig};

/// A keyframe handed from tracking to mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyframePacket {
    pub frame: Frame,
    /// World-to-camera pose.
    pub pose: SE3Pose,
    pub fused_mask: FusedMask,
    /// Estimated depth times the frame's scale factor.
    pub scaled_depth: DepthImage,
}

impl KeyframePacket {
    pub fn validate(&self, k: &CameraIntrinsics) -> Result<()> {
        check_shape(k.dims(), self.frame.color.dims())?;
        check_shape(k.dims(), self.fused_mask.dims())?;
        check_shape(k.dims(), self.scaled_depth.dims())?;
        if !self.pose.is_valid(1e-6) {
            return Err(Error::InvalidInput(format!("keyframe {} has an invalid pose", self.frame.index)));
        }
        Ok(())
    }
}

pub const DEFAULT_STRIDE: usize = 4;
pub const DEFAULT_INIT_OPACITY: f64 = 0.5;
pub const DEFAULT_PRUNE_WEIGHT: f64 = 0.1;

/// One Gaussian per `stride × stride` block of static pixels with valid depth,
/// sampled at the block's central pixel.
pub fn insert_gaussians(pkt: &KeyframePacket, k: &CameraIntrinsics, stride: usize) -> Vec<Gaussian> {
    let stride = stride.max(1);
    let cam_to_world = pkt.pose.inverse();
    let (w, h) = k.dims();
    let mut out = Vec::new();
    for y in (stride / 2..h).step_by(stride) {
        for x in (stride / 2..w).step_by(stride) {
            let d = *pkt.scaled_depth.get(x, y);
            if *pkt.fused_mask.get(x, y) || !depth_is_valid(d) {
                continue;
            }
            let (u, v) = CameraIntrinsics::pixel_center(x, y);
            let p = cam_to_world.transform_point(&k.backproject(u, v, d));
            let c = pkt.frame.color.get(x, y);
            let mut g = Gaussian::isotropic(
                p,
                d * stride as f64 / k.fx,
                DEFAULT_INIT_OPACITY,
                Vector3::new(c[0], c[1], c[2]).map(|v| v.clamp(0.0, 1.0)),
            );
            g.anchor_keyframe = pkt.frame.index;
            out.push(g);
        }
    }
    out
}

/// Marks Gaussians whose projected center lies on a dynamic pixel where their
/// compositing weight exceeds `tau_w` as dead. Returns how many were pruned.
pub fn prune_dynamic(map: &mut GaussianMap, pkt: &KeyframePacket, k: &CameraIntrinsics, tau_w: f64) -> usize {
    let cfg = RenderConfig::default();
    let raster = Rasterization::build(map, &pkt.pose, k, &cfg);
    let mut doomed = Vec::new();
    let mut terms = Vec::new();
    for (x, y, &dynamic) in pkt.fused_mask.enumerate() {
        if !dynamic {
            continue;
        }
        let p = y * k.width + x;
        let (u, v) = CameraIntrinsics::pixel_center(x, y);
        composite_pixel(&raster, p, &Vector2::new(u, v), &cfg, &mut terms);
        for t in &terms {
            let s = &raster.splats[t.splat as usize];
            if k.pixel_of(s.mean.x, s.mean.y) == Some((x, y)) && t.alpha * t.transmittance > tau_w {
                doomed.push(s.map_index);
            }
        }
    }
    let mut n = 0;
    for i in doomed {
        let g = &mut map.gaussians[i];
        if g.alive {
            g.alive = false;
            n += 1;
        }
    }
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    pub stride: usize,
    pub prune_enabled: bool,
    pub prune_weight: f64,
    /// Optimization steps run after each keyframe.
    pub iters_per_keyframe: usize,
    /// Number of most recent keyframes optimized jointly.
    pub window: usize,
    pub weights: MaskedLossWeights,
    pub optimize: OptimizeConfig,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            stride: DEFAULT_STRIDE,
            prune_enabled: true,
            prune_weight: DEFAULT_PRUNE_WEIGHT,
            iters_per_keyframe: 30,
            window: 8,
            weights: MaskedLossWeights::default(),
            optimize: OptimizeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegrateReport {
    pub keyframe: usize,
    pub pruned: usize,
    pub inserted: usize,
    pub optimize: OptimizeReport,
}

/// The single writer of the map.
pub struct Mapper {
    k: CameraIntrinsics,
    cfg: MapperConfig,
    map: GaussianMap,
    packets: Vec<KeyframePacket>,
}

impl Mapper {
    pub fn new(k: CameraIntrinsics, cfg: MapperConfig) -> Result<Self> {
        k.validate()?;
        cfg.weights.validate()?;
        Ok(Self {
            k,
            cfg,
            map: GaussianMap::new(),
            packets: Vec::new(),
        })
    }

    pub fn map(&self) -> &GaussianMap {
        &self.map
    }

    pub fn into_map(self) -> GaussianMap {
        self.map
    }

    pub fn packets(&self) -> &[KeyframePacket] {
        &self.packets
    }

    /// Prune against the new keyframe, seed its static pixels, then optimize the
    /// recent window.
    pub fn integrate(&mut self, pkt: KeyframePacket) -> Result<IntegrateReport> {
        pkt.validate(&self.k)?;
        let pruned = if self.cfg.prune_enabled {
            prune_dynamic(&mut self.map, &pkt, &self.k, self.cfg.prune_weight)
        } else {
            0
        };
        let fresh = insert_gaussians(&pkt, &self.k, self.cfg.stride);
        let inserted = fresh.len();
        self.map.extend(fresh);
        let keyframe = pkt.frame.index;
        self.packets.push(pkt);
        let start = self.packets.len().saturating_sub(self.cfg.window.max(1));
        let optimize = optimize_map(
            &mut self.map,
            &self.packets[start..],
            &self.k,
            self.cfg.iters_per_keyframe,
            &self.cfg.weights,
            &self.cfg.optimize,
        )?;
        Ok(IntegrateReport {
            keyframe,
            pruned,
            inserted,
            optimize,
        })
    }

    /// Extra optimization over every keyframe seen so far.
    pub fn refine(&mut self, iters: usize) -> Result<OptimizeReport> {
        optimize_map(&mut self.map, &self.packets, &self.k, iters, &self.cfg.weights, &self.cfg.optimize)
    }
}
