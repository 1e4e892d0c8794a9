use nalgebra::{Matrix6, Vector6};

use crate::error::{check_shape, Error, Result};
use crate::scene_model::{CameraIntrinsics, ColorImage, GaussianMap, Grid, MaskImage, SE3Pose};
use crate::splat_renderer::{render, render_backward, render_pose_jacobian};

pub const MIN_BA_GROUP: usize = 4;

/// Keyframes taking part in local bundle adjustment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyframeGroup {
    pub members: Vec<usize>,
    /// World-to-camera pose per member.
    pub poses: Vec<SE3Pose>,
    pub images: Vec<ColorImage>,
    /// Pixels usable as photometric evidence (static, per member).
    pub masks: Vec<MaskImage>,
}

impl KeyframeGroup {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn push(&mut self, index: usize, pose: SE3Pose, image: ColorImage, mask: MaskImage) {
        self.members.push(index);
        self.poses.push(pose);
        self.images.push(image);
        self.masks.push(mask);
    }

    /// Keep only the newest `n` members.
    pub fn truncate_front(&mut self, n: usize) {
        let drop = self.len().saturating_sub(n);
        self.members.drain(..drop);
        self.poses.drain(..drop);
        self.images.drain(..drop);
        self.masks.drain(..drop);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaConfig {
    pub max_iters: usize,
    pub step_tol: f64,
    /// Standard deviations of a Gaussian prior centred on each member's input
    /// pose, meters and radians. Infinity removes the prior.
    pub prior_sigma_translation: f64,
    pub prior_sigma_rotation: f64,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            max_iters: 10,
            step_tol: 1e-10,
            prior_sigma_translation: 0.01,
            prior_sigma_rotation: 0.005,
        }
    }
}

impl BaConfig {
    fn prior_weights(&self) -> Vector6<f64> {
        let wt = 1.0 / self.prior_sigma_translation;
        let wr = 1.0 / self.prior_sigma_rotation;
        Vector6::new(wt, wt, wt, wr, wr, wr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prior_sigma_translation > 0.0 && self.prior_sigma_rotation > 0.0) {
            return Err(Error::Config("BA prior deviations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaResult {
    pub poses: Vec<SE3Pose>,
    pub cost_before: f64,
    pub cost_after: f64,
    /// Per-member objective (photometric plus prior) trace, one entry per
    /// accepted step plus the start.
    pub traces: Vec<Vec<f64>>,
}

fn residual(
    map: &GaussianMap,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    image: &ColorImage,
    mask: &MaskImage,
) -> (f64, Grid<[f64; 4]>) {
    let out = render(map, pose, k);
    let mut cost = 0.0;
    let mut grad = Grid::new(k.width, k.height, [0.0; 4]);
    for (i, ((r, o), &keep)) in out
        .color
        .data()
        .iter()
        .zip(image.data())
        .zip(mask.data())
        .enumerate()
    {
        if !keep {
            continue;
        }
        let d = [r[0] - o[0], r[1] - o[1], r[2] - o[2]];
        cost += 0.5 * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
        grad.data_mut()[i] = [d[0], d[1], d[2], 0.0];
    }
    (cost, grad)
}

/// Pose-only refinement of every group member against the map.
///
/// The cost is half the squared color error over each member's masked pixels.
/// Each member minimizes that cost plus a quadratic prior on its displacement
/// from the input pose by damped Gauss-Newton. Steps that raise the objective
/// are rejected; as the prior vanishes at the input, the returned cost never
/// exceeds the input cost.
pub fn local_bundle_adjust(
    group: &KeyframeGroup,
    map: &GaussianMap,
    k: &CameraIntrinsics,
) -> Result<BaResult> {
    local_bundle_adjust_with(group, map, k, &BaConfig::default())
}

pub fn local_bundle_adjust_with(
    group: &KeyframeGroup,
    map: &GaussianMap,
    k: &CameraIntrinsics,
    cfg: &BaConfig,
) -> Result<BaResult> {
    if group.len() < MIN_BA_GROUP {
        return Err(Error::Precondition(format!(
            "bundle adjustment needs {MIN_BA_GROUP} keyframes, got {}",
            group.len()
        )));
    }
    let n = group.len();
    if group.poses.len() != n || group.images.len() != n || group.masks.len() != n {
        return Err(Error::InvalidInput("keyframe group fields differ in length".into()));
    }
    for (img, m) in group.images.iter().zip(&group.masks) {
        check_shape(k.dims(), img.dims())?;
        check_shape(k.dims(), m.dims())?;
    }
    cfg.validate()?;
    let wp = cfg.prior_weights();
    let prior = |pose: &SE3Pose, input: &SE3Pose| -> Vector6<f64> {
        pose.compose(&input.inverse()).log().component_mul(&wp)
    };

    let mut poses = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    let mut before = 0.0;
    let mut after = 0.0;
    for i in 0..n {
        let (image, mask) = (&group.images[i], &group.masks[i]);
        let input = group.poses[i];
        let mut pose = input;
        let (mut cost, mut lg) = residual(map, &pose, k, image, mask);
        before += cost;
        let mut objective = cost;
        let mut rp = Vector6::zeros();
        let mut trace = vec![objective];
        let mut lambda = 1e-3;
        for _ in 0..cfg.max_iters {
            let g = render_backward(map, &pose, k, &lg).pose + rp.component_mul(&wp);
            let jac = render_pose_jacobian(map, &pose, k);
            let mut h = Matrix6::<f64>::zeros();
            for (j, &keep) in jac.jacobian.data().iter().zip(mask.data()) {
                if keep {
                    let jc = j.fixed_rows::<3>(0);
                    h += jc.transpose() * jc;
                }
            }
            for d in 0..6 {
                h[(d, d)] += wp[d] * wp[d];
            }
            let mut improved = false;
            let mut tiny = false;
            for _ in 0..8 {
                let mut damped = h;
                for d in 0..6 {
                    damped[(d, d)] += lambda * (h[(d, d)] + 1e-12);
                }
                let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                    lambda *= 10.0;
                    continue;
                };
                if step.norm() < cfg.step_tol {
                    tiny = true;
                    break;
                }
                let candidate = pose.retract(&step);
                let (c, l) = residual(map, &candidate, k, image, mask);
                let r = prior(&candidate, &input);
                let obj = c + 0.5 * r.norm_squared();
                if obj < objective {
                    pose = candidate;
                    cost = c;
                    objective = obj;
                    rp = r;
                    lg = l;
                    lambda = (lambda * 0.3).max(1e-12);
                    improved = true;
                    break;
                }
                lambda *= 10.0;
            }
            if !improved {
                break;
            }
            trace.push(objective);
            if tiny {
                break;
            }
        }
        after += cost;
        poses.push(pose);
        traces.push(trace);
    }
    Ok(BaResult {
        poses,
        cost_before: before,
        cost_after: after,
        traces,
    })
}

/// Gradient of the BA cost for one member; exposed for diagnostics.
pub fn ba_pose_gradient(
    map: &GaussianMap,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    image: &ColorImage,
    mask: &MaskImage,
) -> Vector6<f64> {
    let (_, lg) = residual(map, pose, k, image, mask);
    render_backward(map, pose, k, &lg).pose
}
