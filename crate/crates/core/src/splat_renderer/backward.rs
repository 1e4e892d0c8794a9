use nalgebra::{Matrix2, Matrix3, Quaternion, Vector2, Vector3, Vector6};

use super::{composite_pixel, Contribution, Rasterization, RenderConfig};
use crate::scene_model::{hat, quat_to_matrix, CameraIntrinsics, GaussianMap, Grid, SE3Pose};

/// Partial derivatives of a scalar loss with respect to one Gaussian.
///
/// `rotation` holds the partials w.r.t. the raw quaternion components; the
/// renderer normalizes the quaternion, so the result is tangent to the unit sphere
/// at a unit quaternion.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrad {
    pub position: Vector3<f64>,
    pub rotation: Quaternion<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Default for GaussianGrad {
    fn default() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: Quaternion::new(0.0, 0.0, 0.0, 0.0),
            scale: Vector3::zeros(),
            opacity: 0.0,
            color: Vector3::zeros(),
        }
    }
}

impl GaussianGrad {
    pub fn is_zero(&self) -> bool {
        self.position == Vector3::zeros()
            && self.rotation.coords == nalgebra::Vector4::zeros()
            && self.scale == Vector3::zeros()
            && self.opacity == 0.0
            && self.color == Vector3::zeros()
    }
}

/// Gradients for every Gaussian (indexed like `GaussianMap::gaussians`) and for a
/// left-multiplied pose twist `(v, ω)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    pub gaussians: Vec<GaussianGrad>,
    pub pose: Vector6<f64>,
}

#[derive(Clone, Default)]
struct SplatAccum {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
}

/// Reverse pass of [`super::render`] for an upstream gradient laid out per pixel as
/// `[∂L/∂C_r, ∂L/∂C_g, ∂L/∂C_b, ∂L/∂D]`.
pub fn render_backward(
    map: &GaussianMap,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    loss_grad: &Grid<[f64; 4]>,
) -> RenderGradients {
    render_backward_with(map, pose, k, loss_grad, &RenderConfig::default())
}

pub fn render_backward_with(
    map: &GaussianMap,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    loss_grad: &Grid<[f64; 4]>,
    cfg: &RenderConfig,
) -> RenderGradients {
    assert_eq!(loss_grad.dims(), k.dims(), "loss gradient shape");
    let raster = Rasterization::build(map, pose, k, cfg);
    let mut acc = vec![SplatAccum::default(); raster.splats.len()];
    let mut terms: Vec<Contribution> = Vec::new();

    for (p, lg) in loss_grad.data().iter().enumerate() {
        if lg.iter().all(|&v| v == 0.0) {
            continue;
        }
        let gc = Vector3::new(lg[0], lg[1], lg[2]);
        let gd = lg[3];
        let (u, v) = CameraIntrinsics::pixel_center(p % k.width, p / k.width);
        composite_pixel(&raster, p, &Vector2::new(u, v), cfg, &mut terms);

        // sums over terms behind the current one
        let mut behind_c = Vector3::zeros();
        let mut behind_d = 0.0;
        for t in terms.iter().rev() {
            let si = t.splat as usize;
            let s = &raster.splats[si];
            let w = t.alpha * t.transmittance;
            let a = &mut acc[si];
            a.color += gc * w;
            a.depth += gd * w;
            let dl_dalpha = t.transmittance * (gc.dot(&s.color) + gd * s.p_cam.z)
                - (gc.dot(&behind_c) + gd * behind_d) / (1.0 - t.alpha);
            behind_c += s.color * w;
            behind_d += s.p_cam.z * w;
            if t.saturated {
                continue;
            }
            let q = t.delta.dot(&(s.conic * t.delta));
            let e = (-0.5 * q).exp();
            a.opacity += dl_dalpha * e;
            let dl_dq = dl_dalpha * (-0.5 * t.alpha);
            a.mean += (s.conic * t.delta) * (-2.0 * dl_dq);
            a.conic += t.delta * t.delta.transpose() * dl_dq;
        }
    }

    let mut gaussians = vec![GaussianGrad::default(); map.gaussians.len()];
    let mut pose_grad = Vector6::zeros();
    let w = &pose.rotation;
    for (s, a) in raster.splats.iter().zip(&acc) {
        let g = &map.gaussians[s.map_index];
        // Σ' = J Σc Jᵀ + δI, A = Σ'⁻¹
        let g_cov2d = -(s.conic * a.conic * s.conic);
        let g_jac = g_cov2d * s.jac * s.sigma_cam * 2.0;
        let g_sigma_cam = s.jac.transpose() * g_cov2d * s.jac;

        let (x, y, z) = (s.p_cam.x, s.p_cam.y, s.p_cam.z);
        let iz2 = 1.0 / (z * z);
        let iz3 = iz2 / z;
        let mut g_pc = s.jac.transpose() * a.mean;
        g_pc.z += a.depth;
        g_pc.x += g_jac[(0, 2)] * (-k.fx * iz2);
        g_pc.y += g_jac[(1, 2)] * (-k.fy * iz2);
        g_pc.z += g_jac[(0, 0)] * (-k.fx * iz2)
            + g_jac[(0, 2)] * (2.0 * k.fx * x * iz3)
            + g_jac[(1, 1)] * (-k.fy * iz2)
            + g_jac[(1, 2)] * (2.0 * k.fy * y * iz3);

        let g_sigma = w.transpose() * g_sigma_cam * w;
        let r = quat_to_matrix(&g.rotation);
        let m = r.transpose() * g_sigma * r;
        let s2 = g.scale.component_mul(&g.scale);
        let g_r = g_sigma * r * Matrix3::from_diagonal(&s2) * 2.0;

        let out = &mut gaussians[s.map_index];
        out.position = w.transpose() * g_pc;
        out.scale = Vector3::new(
            2.0 * g.scale.x * m[(0, 0)],
            2.0 * g.scale.y * m[(1, 1)],
            2.0 * g.scale.z * m[(2, 2)],
        );
        out.rotation = quat_matrix_vjp(&g.rotation, &g_r);
        out.opacity = a.opacity;
        out.color = a.color;

        let g_w = s.p_cam.cross(&g_pc);
        pose_grad[0] += g_pc.x;
        pose_grad[1] += g_pc.y;
        pose_grad[2] += g_pc.z;
        for axis in 0..3 {
            let e = hat(&Vector3::ith(axis, 1.0));
            let d_sigma = e * s.sigma_cam + s.sigma_cam * e.transpose();
            pose_grad[3 + axis] += g_sigma_cam.component_mul(&d_sigma).sum() + g_w[axis];
        }
    }

    RenderGradients {
        gaussians,
        pose: pose_grad,
    }
}

/// Pulls `∂L/∂R` back to the raw (unnormalized) quaternion.
pub(crate) fn quat_matrix_vjp(q: &Quaternion<f64>, g: &Matrix3<f64>) -> Quaternion<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    let m = |r: usize, c: usize| g[(r, c)];
    let dw = 2.0 * (-z * m(0, 1) + y * m(0, 2) + z * m(1, 0) - x * m(1, 2) - y * m(2, 0) + x * m(2, 1));
    let dx = 2.0
        * (y * m(0, 1) + z * m(0, 2) + y * m(1, 0) - 2.0 * x * m(1, 1) - w * m(1, 2)
            + z * m(2, 0)
            + w * m(2, 1)
            - 2.0 * x * m(2, 2));
    let dy = 2.0
        * (-2.0 * y * m(0, 0) + x * m(0, 1) + w * m(0, 2) + x * m(1, 0) + z * m(1, 2)
            - w * m(2, 0)
            + z * m(2, 1)
            - 2.0 * y * m(2, 2));
    let dz = 2.0
        * (-2.0 * z * m(0, 0) - w * m(0, 1) + x * m(0, 2) + w * m(1, 0) - 2.0 * z * m(1, 1)
            + y * m(1, 2)
            + x * m(2, 0)
            + y * m(2, 1));
    // project out the radial direction and undo the normalization
    let dot = w * dw + x * dx + y * dy + z * dz;
    Quaternion::new(
        (dw - w * dot) / n,
        (dx - x * dot) / n,
        (dy - y * dot) / n,
        (dz - z * dot) / n,
    )
}
