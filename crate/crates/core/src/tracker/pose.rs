use nalgebra::{Matrix2x3, Matrix6, SMatrix, Vector2, Vector3, Vector6};

use super::loss::{ScaleFactor, StaticDepthMask};
use crate::error::{check_shape, Error, Result};
use crate::scene_model::{
    depth_is_valid, hat, CameraIntrinsics, DepthImage, FlowField, Frame, Grid, SE3Pose,
};

pub const MIN_POSE_PIXELS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSolverConfig {
    /// Huber kernel width in pixels.
    pub huber_delta: f64,
    pub max_iters: usize,
    pub step_tol: f64,
    /// Fall back to the initial pose when the cost grows by this factor.
    pub divergence_factor: f64,
    pub min_pixels: usize,
}

impl Default for PoseSolverConfig {
    fn default() -> Self {
        Self {
            huber_delta: 1.0,
            max_iters: 30,
            step_tol: 1e-8,
            divergence_factor: 5.0,
            min_pixels: MIN_POSE_PIXELS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseStats {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Huber-weighted RMS reprojection error of the final pose.
    pub rms: f64,
    pub pixels: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the solve diverged and the initial pose was returned.
    pub fell_back: bool,
}

#[inline]
fn huber(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

struct Correspondence {
    point: Vector3<f64>,
    target: Vector2<f64>,
}

fn correspondences(
    prev: &Frame,
    flow: &FlowField,
    m_ds: &StaticDepthMask,
    s: ScaleFactor,
    k: &CameraIntrinsics,
) -> Result<Vec<Correspondence>> {
    let depth = prev
        .est_depth
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("frame {} has no depth", prev.index)))?;
    check_shape(k.dims(), depth.dims())?;
    check_shape(k.dims(), flow.dims())?;
    check_shape(k.dims(), m_ds.bits.dims())?;
    let s = s.value();
    let mut out = Vec::new();
    for (x, y, &keep) in m_ds.bits.enumerate() {
        let d = *depth.get(x, y);
        if !keep || !depth_is_valid(d) {
            continue;
        }
        let (u, v) = CameraIntrinsics::pixel_center(x, y);
        let f = flow.get(x, y);
        out.push(Correspondence {
            point: k.backproject(u, v, s * d),
            target: Vector2::new(u + f[0] / s, v + f[1] / s),
        });
    }
    Ok(out)
}

fn cost(e: &SE3Pose, cs: &[Correspondence], k: &CameraIntrinsics, delta: f64) -> f64 {
    cs.iter()
        .map(|c| {
            let q = e.transform_point(&c.point);
            if q.z <= 1e-9 {
                return huber(1e6, delta);
            }
            huber((k.project(&q) - c.target).norm(), delta)
        })
        .sum()
}

/// Relative pose `E` (previous camera to current camera) minimizing the Huber
/// reprojection error of static pixels, back-projected at `s · est_depth`, onto
/// their flow targets.
///
/// `f_tilde` is the scaled flow `F · M_ds · s`; the target of pixel `p` is
/// `p + F̃(p) / s`.
pub fn estimate_pose(
    prev: &Frame,
    curr: &Frame,
    f_tilde: &FlowField,
    m_ds: &StaticDepthMask,
    s: ScaleFactor,
    k: &CameraIntrinsics,
    init: &SE3Pose,
) -> Result<(SE3Pose, PoseStats)> {
    estimate_pose_with(prev, curr, f_tilde, m_ds, s, k, init, &PoseSolverConfig::default())
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_pose_with(
    prev: &Frame,
    curr: &Frame,
    f_tilde: &FlowField,
    m_ds: &StaticDepthMask,
    s: ScaleFactor,
    k: &CameraIntrinsics,
    init: &SE3Pose,
    cfg: &PoseSolverConfig,
) -> Result<(SE3Pose, PoseStats)> {
    check_shape(prev.dims(), curr.dims())?;
    let cs = correspondences(prev, f_tilde, m_ds, s, k)?;
    if cs.len() < cfg.min_pixels {
        return Err(Error::TrackingLost(format!(
            "{} static pixels with depth, need {}",
            cs.len(),
            cfg.min_pixels
        )));
    }
    let delta = cfg.huber_delta;
    let initial_cost = cost(init, &cs, k, delta);
    let mut e = *init;
    let mut current = initial_cost;
    let mut lambda = 1e-4;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iters {
        iterations += 1;
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for c in &cs {
            let q = e.transform_point(&c.point);
            if q.z <= 1e-9 {
                continue;
            }
            let r = k.project(&q) - c.target;
            let rn = r.norm();
            let w = if rn <= delta { 1.0 } else { delta / rn };
            let iz = 1.0 / q.z;
            let dproj = Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * q.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * q.y * iz * iz,
            );
            let mut dq = SMatrix::<f64, 3, 6>::zeros();
            dq.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
            dq.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(&q)));
            let j = dproj * dq;
            h += j.transpose() * j * w;
            g += j.transpose() * r * w;
        }
        let mut accepted = false;
        for _ in 0..10 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * (h[(i, i)] + 1e-9);
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = e.retract(&step);
            let c = cost(&candidate, &cs, k, delta);
            if c <= current {
                e = candidate;
                current = c;
                lambda = (lambda * 0.3).max(1e-9);
                accepted = true;
                if step.norm() < cfg.step_tol {
                    converged = true;
                }
                break;
            }
            if step.norm() < cfg.step_tol {
                converged = true;
                break;
            }
            lambda *= 10.0;
        }
        if converged || !accepted {
            converged = true;
            break;
        }
    }

    let fell_back = !current.is_finite() || current > cfg.divergence_factor * initial_cost.max(1e-300);
    if fell_back {
        e = *init;
        current = initial_cost;
    }
    let stats = PoseStats {
        initial_cost,
        final_cost: current,
        rms: (2.0 * current / cs.len() as f64).sqrt(),
        pixels: cs.len(),
        iterations,
        converged,
        fell_back,
    };
    Ok((e, stats))
}

/// Flow a static scene would show for relative motion `e` at the given depth.
/// Pixels without valid depth, or mapped behind the camera, get NaN.
pub fn rigid_flow(e: &SE3Pose, depth: &DepthImage, k: &CameraIntrinsics) -> FlowField {
    Grid::from_fn(depth.width(), depth.height(), |x, y| {
        let d = *depth.get(x, y);
        if !depth_is_valid(d) {
            return [f64::NAN, f64::NAN];
        }
        let (u, v) = CameraIntrinsics::pixel_center(x, y);
        let q = e.transform_point(&k.backproject(u, v, d));
        if q.z <= 1e-9 {
            return [f64::NAN, f64::NAN];
        }
        let p = k.project(&q);
        [p.x - u, p.y - v]
    })
}
