//! Frame-to-frame camera tracking.
//!
//! Each incoming frame `n` closes the pair `(n-1, n)`: the dynamic mask of
//! frame `n-1` is fused from the flow and depth cues, static pixels with depth are
//! back-projected at the current scale and aligned to their flow targets, and the
//! scale of frame `n` is re-estimated against the map (or, before the map covers
//! the view, against depth chained through the estimated motion).

mod ba;
mod loss;
mod pose;

pub use ba::{
    ba_pose_gradient, local_bundle_adjust, local_bundle_adjust_with, BaConfig, BaResult,
    KeyframeGroup, MIN_BA_GROUP,
};
pub use loss::{
    estimate_scale, flow_endpoint_loss, mask_bce, motion_loss, motion_loss_terms, scaled_flow,
    static_mask, tracking_loss, MotionLoss, ScaleFactor, StaticDepthMask, TrackingLossTerms,
    MIN_SCALE_PIXELS,
};
pub use pose::{
    estimate_pose, estimate_pose_with, rigid_flow, PoseSolverConfig, PoseStats, MIN_POSE_PIXELS,
};

pub(crate) use loss::median;

use crate::error::{Error, Result};
use crate::mapper::KeyframePacket;
use crate::mask_fusion::{depth_mask, flow_mask, fuse, PosteriorParams};
use crate::scene_model::{
    depth_is_valid, sample_depth_bilinear, CameraIntrinsics, DepthImage, FlowField, Frame,
    FusedMask, GaussianMap, Grid, MaskImage, SE3Pose,
};
use crate::splat_renderer::render;

pub const KEYFRAME_INTERVAL: usize = 10;
const SENT_HISTORY: usize = 4;

pub fn keyframe_policy(frame_index: usize) -> bool {
    frame_index.is_multiple_of(KEYFRAME_INTERVAL)
}

/// Inputs to depth-consistency checking on the grid of the earlier frame:
/// the depth each pixel should have in the later frame under the rigid motion
/// `e`, and the later frame's estimate sampled at the flow target (rescaled by
/// the median ratio between the two). Undefined entries are NaN.
pub fn depth_consistency(
    prev_depth: &DepthImage,
    curr_depth: &DepthImage,
    flow: &FlowField,
    e: &SE3Pose,
    k: &CameraIntrinsics,
) -> (DepthImage, DepthImage) {
    let (w, h) = prev_depth.dims();
    let mut predicted = Grid::new(w, h, f64::NAN);
    let mut observed = Grid::new(w, h, f64::NAN);
    let mut ratios = Vec::new();
    for (x, y, &d) in prev_depth.enumerate() {
        if !depth_is_valid(d) {
            continue;
        }
        let (u, v) = CameraIntrinsics::pixel_center(x, y);
        let z = e.transform_point(&k.backproject(u, v, d)).z;
        let f = flow.get(x, y);
        let Some(dn) = sample_depth_bilinear(curr_depth, u + f[0], v + f[1]) else {
            continue;
        };
        if z > 0.0 && depth_is_valid(dn) {
            predicted.set(x, y, z);
            observed.set(x, y, dn);
            ratios.push(z / dn);
        }
    }
    if ratios.is_empty() {
        return (predicted, observed);
    }
    let s = median(&mut ratios);
    for v in observed.data_mut() {
        *v *= s;
    }
    (predicted, observed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub mask_fusion: bool,
    pub tau_f: f64,
    pub tau_d: f64,
    pub k_max: usize,
    pub posterior: PosteriorParams,
    pub solver: PoseSolverConfig,
    pub ba_enabled: bool,
    pub ba: BaConfig,
    pub ba_window: usize,
    /// Rendered pixels with less accumulated weight are not used as depth or
    /// photometric reference.
    pub min_render_weight: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            mask_fusion: true,
            tau_f: crate::mask_fusion::DEFAULT_TAU_F,
            tau_d: crate::mask_fusion::DEFAULT_TAU_D,
            k_max: crate::mask_fusion::DEFAULT_K_MAX,
            posterior: PosteriorParams::default(),
            solver: PoseSolverConfig::default(),
            ba_enabled: true,
            ba: BaConfig::default(),
            ba_window: MIN_BA_GROUP,
            min_render_weight: 0.5,
            lambda1: 1.0,
            lambda2: 1.0,
            epsilon: 1e-6,
        }
    }
}

/// Ground truth for the pair `(n-1, n)`, available in simulation.
#[derive(Clone, Debug)]
pub struct TrackReference {
    pub flow: FlowField,
    pub dynamic_mask: MaskImage,
    /// True relative motion from camera `n-1` to camera `n`.
    pub relative: SE3Pose,
}

/// Everything the tracker learned while closing one frame pair.
#[derive(Clone, Debug)]
pub struct TrackStep {
    pub index: usize,
    /// World-to-camera pose of the new frame.
    pub pose: SE3Pose,
    pub scale: ScaleFactor,
    /// Relative motion from the previous camera.
    pub relative: SE3Pose,
    /// Fused dynamic mask of the previous frame.
    pub prev_mask: FusedMask,
    pub pose_stats: PoseStats,
    /// Set when the scale could not be observed and the previous one was kept.
    pub scale_reused: bool,
    pub ba: Option<BaResult>,
    pub packet: Option<KeyframePacket>,
    pub losses: Option<TrackingLossTerms>,
}

struct Previous {
    frame: Frame,
    pose: SE3Pose,
    scale: ScaleFactor,
    ingested_mask: Option<MaskImage>,
}

/// Sequential tracker state: last frame, pose and scale, motion prior and the
/// keyframe window.
pub struct Tracker {
    k: CameraIntrinsics,
    cfg: TrackerConfig,
    prev: Option<Previous>,
    velocity: SE3Pose,
    group: KeyframeGroup,
    /// `(index, timestamp, world-to-camera pose)` per processed frame.
    trajectory: Vec<(usize, f64, SE3Pose)>,
    /// Keyframes handed to the mapper, newest last.
    sent: Vec<KeyframePacket>,
    /// Ratio of rendered to inserted depth at the newest keyframe in the map.
    depth_bias: Option<(usize, f64)>,
}

impl Tracker {
    pub fn new(k: CameraIntrinsics, cfg: TrackerConfig) -> Result<Self> {
        k.validate()?;
        cfg.posterior.validate()?;
        Ok(Self {
            k,
            cfg,
            prev: None,
            velocity: SE3Pose::identity(),
            group: KeyframeGroup::default(),
            trajectory: Vec::new(),
            sent: Vec::new(),
            depth_bias: None,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn trajectory(&self) -> &[(usize, f64, SE3Pose)] {
        &self.trajectory
    }

    /// Feed the next frame. `ingested_mask` is an external motion segmentation of
    /// this frame used as the flow cue in place of rigid-flow residuals. `map` is
    /// the latest map snapshot, if any.
    ///
    /// The first frame fixes the gauge (identity pose, unit scale) and returns
    /// `None`.
    pub fn process(
        &mut self,
        mut frame: Frame,
        ingested_mask: Option<MaskImage>,
        map: Option<&GaussianMap>,
        reference: Option<&TrackReference>,
    ) -> Result<Option<TrackStep>> {
        frame.validate(&self.k)?;
        if frame.est_depth.is_none() {
            return Err(Error::InvalidInput(format!("frame {} has no depth", frame.index)));
        }
        frame.is_keyframe = keyframe_policy(frame.index);
        let Some(prev) = self.prev.take() else {
            self.trajectory.push((frame.index, frame.timestamp, SE3Pose::identity()));
            self.prev = Some(Previous {
                frame,
                pose: SE3Pose::identity(),
                scale: ScaleFactor::one(),
                ingested_mask,
            });
            return Ok(None);
        };
        let step = self.close_pair(prev, &frame, map, reference)?;
        self.trajectory.push((frame.index, frame.timestamp, step.pose));
        self.prev = Some(Previous {
            frame,
            pose: step.pose,
            scale: step.scale,
            ingested_mask,
        });
        Ok(Some(step))
    }

    /// Packet for the last frame when it is a keyframe; its dynamic mask is the
    /// ingested one, or empty.
    pub fn finish(&mut self) -> Option<KeyframePacket> {
        let prev = self.prev.take()?;
        if !prev.frame.is_keyframe {
            return None;
        }
        let (w, h) = self.k.dims();
        let mask = prev.ingested_mask.clone().unwrap_or_else(|| Grid::new(w, h, false));
        Some(packet(&prev, mask))
    }

    fn close_pair(
        &mut self,
        prev: Previous,
        curr: &Frame,
        map: Option<&GaussianMap>,
        reference: Option<&TrackReference>,
    ) -> Result<TrackStep> {
        let k = self.k;
        let (w, h) = k.dims();
        let flow = prev.frame.flow_to_next.as_ref().ok_or_else(|| {
            Error::InvalidInput(format!("frame {} has no flow to the next frame", prev.frame.index))
        })?;
        let d_prev = prev.frame.est_depth.as_ref().expect("checked on entry");
        let d_curr = curr.est_depth.as_ref().expect("checked on entry");
        let d_prev_scaled = d_prev.map(|d| d * prev.scale.value());
        let e_pred = self.velocity;

        let fused = if self.cfg.mask_fusion {
            let f_m = match &prev.ingested_mask {
                Some(m) => m.clone(),
                None => flow_mask(flow, &rigid_flow(&e_pred, &d_prev_scaled, &k), self.cfg.tau_f)?,
            };
            let (predicted, observed) = depth_consistency(&d_prev_scaled, d_curr, flow, &e_pred, &k);
            let d_m = depth_mask(&predicted, &observed, self.cfg.tau_d)?;
            fuse(&f_m, &d_m, &self.cfg.posterior, self.cfg.k_max)?.0
        } else {
            Grid::new(w, h, false)
        };

        let m_ds = static_mask(&fused, d_prev)?;
        let mut prev_pose = prev.pose;
        let mut ba_result = None;
        if prev.frame.is_keyframe {
            self.group
                .push(prev.frame.index, prev.pose, prev.frame.color.clone(), m_ds.bits.clone());
            self.group.truncate_front(self.cfg.ba_window.max(MIN_BA_GROUP));
            if let (true, Some(map)) = (self.cfg.ba_enabled, map) {
                if self.group.len() >= MIN_BA_GROUP && map.alive_count() > 0 {
                    let mut g = self.group.clone();
                    for (pose, mask) in g.poses.iter().zip(g.masks.iter_mut()) {
                        let cover = render(map, pose, &k).weight_sum;
                        for (b, &wt) in mask.data_mut().iter_mut().zip(cover.data()) {
                            *b = *b && wt > self.cfg.min_render_weight;
                        }
                    }
                    let r = local_bundle_adjust_with(&g, map, &k, &self.cfg.ba)?;
                    self.group.poses.clone_from(&r.poses);
                    prev_pose = *r.poses.last().expect("non-empty group");
                    for (idx, pose) in g.members.iter().zip(&r.poses) {
                        if let Some(entry) = self.trajectory.iter_mut().find(|t| t.0 == *idx) {
                            entry.2 = *pose;
                        }
                    }
                    ba_result = Some(r);
                }
            }
        }

        let f_tilde = scaled_flow(flow, &m_ds, prev.scale)?;
        let (e, pose_stats) =
            estimate_pose_with(&prev.frame, curr, &f_tilde, &m_ds, prev.scale, &k, &e_pred, &self.cfg.solver)?;
        let pose = e.compose(&prev_pose);
        self.velocity = e;

        let (scale, scale_reused) = match self.estimate_frame_scale(&d_prev_scaled, d_curr, flow, &m_ds, &e, &pose, map) {
            Some(s) => (s, false),
            None => (prev.scale, true),
        };

        let losses = reference.map(|r| {
            let l_o = flow_endpoint_loss(flow, &r.flow, &m_ds).unwrap_or(0.0);
            let prob = fused.map(|&b| if b { 1.0 } else { 0.0 });
            let l_u = mask_bce(&prob, &r.dynamic_mask).unwrap_or(0.0);
            let l_m = motion_loss(&e, &r.relative, prev.scale, &m_ds, self.cfg.epsilon);
            TrackingLossTerms {
                l_o,
                l_u,
                l_m,
                lambda1: self.cfg.lambda1,
                lambda2: self.cfg.lambda2,
                epsilon: self.cfg.epsilon,
            }
        });

        let packet = prev.frame.is_keyframe.then(|| {
            packet(
                &Previous {
                    pose: prev_pose,
                    ..prev
                },
                fused.clone(),
            )
        });
        if let Some(p) = &packet {
            self.sent.push(p.clone());
            let excess = self.sent.len().saturating_sub(SENT_HISTORY);
            self.sent.drain(..excess);
        }

        Ok(TrackStep {
            index: curr.index,
            pose,
            scale,
            relative: e,
            prev_mask: fused,
            pose_stats,
            scale_reused,
            ba: ba_result,
            packet,
            losses,
        })
    }

    #[allow(clippy::too_many_arguments)]
    /// Median ratio of the map's rendered depth to the depth it was built
    /// from, measured at the newest keyframe the map contains. Splats
    /// composited front to back render nearer than the surface they sample;
    /// dividing by this ratio keeps that offset from compounding across
    /// keyframes.
    fn map_depth_bias(&mut self, map: &GaussianMap) -> f64 {
        let Some(newest) = map.alive().map(|g| g.anchor_keyframe).max() else {
            return 1.0;
        };
        if let Some((kf, b)) = self.depth_bias {
            if kf == newest {
                return b;
            }
        }
        let b = self
            .sent
            .iter()
            .find(|p| p.frame.index == newest)
            .and_then(|p| {
                let rendered = render(map, &p.pose, &self.k).normalized_depth(self.cfg.min_render_weight);
                let m = static_mask(&p.fused_mask, &p.scaled_depth).ok()?;
                estimate_scale(&p.scaled_depth, &rendered, &m).ok()
            })
            .map_or(1.0, |s| s.value());
        self.depth_bias = Some((newest, b));
        b
    }

    #[allow(clippy::too_many_arguments)]
    fn estimate_frame_scale(
        &mut self,
        d_prev_scaled: &DepthImage,
        d_curr: &DepthImage,
        flow: &FlowField,
        m_ds: &StaticDepthMask,
        e: &SE3Pose,
        pose: &SE3Pose,
        map: Option<&GaussianMap>,
    ) -> Option<ScaleFactor> {
        let k = &self.k;
        let (w, h) = k.dims();
        let mut est = Grid::new(w, h, 0.0);
        let mut rendered_ref = Grid::new(w, h, 0.0);
        let rendered = map
            .filter(|m| m.alive_count() > 0)
            .map(|m| render(m, pose, k).normalized_depth(self.cfg.min_render_weight));
        for (x, y, _) in m_ds.bits.enumerate() {
            let (u, v) = CameraIntrinsics::pixel_center(x, y);
            let f = flow.get(x, y);
            let (qu, qv) = (u + f[0], v + f[1]);
            if let Some(dn) = sample_depth_bilinear(d_curr, qu, qv) {
                est.set(x, y, dn);
            }
            if let Some(r) = rendered.as_ref().and_then(|r| sample_depth_bilinear(r, qu, qv)) {
                rendered_ref.set(x, y, r);
            }
        }
        if let (Some(map), true) = (map, rendered.is_some()) {
            if let Ok(s) = estimate_scale(&est, &rendered_ref, m_ds) {
                let bias = self.map_depth_bias(map);
                return ScaleFactor::new(s.value() / bias).ok();
            }
        }
        let (chained, _) = depth_consistency(d_prev_scaled, d_curr, flow, e, k);
        let chained = chained.map(|&z| if z.is_finite() { z } else { 0.0 });
        estimate_scale(&est, &chained, m_ds).ok()
    }
}

fn packet(prev: &Previous, fused_mask: FusedMask) -> KeyframePacket {
    let depth = prev.frame.est_depth.as_ref().expect("frames carry depth");
    KeyframePacket {
        frame: prev.frame.clone(),
        pose: prev.pose,
        scaled_depth: depth.map(|d| d * prev.scale.value()),
        fused_mask,
    }
}
