use nalgebra::{Matrix2, Matrix2x3, Matrix3, SMatrix, Vector2, Vector3, Vector6};

use super::{composite_pixel, Rasterization, RenderConfig, RenderOutput};
use crate::scene_model::{hat, CameraIntrinsics, GaussianMap, Grid, SE3Pose};

/// Rows `[C_r, C_g, C_b, D]`, columns the pose twist `(v, ω)`.
pub type PixelJacobian = SMatrix<f64, 4, 6>;

#[derive(Clone, Debug)]
pub struct PoseJacobian {
    pub render: RenderOutput,
    pub jacobian: Grid<PixelJacobian>,
}

struct SplatTangent {
    mean: SMatrix<f64, 2, 6>,
    depth: Vector6<f64>,
    conic: [Matrix2<f64>; 6],
}

fn splat_tangent(
    p: &Vector3<f64>,
    sigma_cam: &Matrix3<f64>,
    jac: &Matrix2x3<f64>,
    conic: &Matrix2<f64>,
    k: &CameraIntrinsics,
) -> SplatTangent {
    // dp/dξ = [I | -[p]×]
    let mut dp = SMatrix::<f64, 3, 6>::zeros();
    dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(p)));
    let mean = jac * dp;
    let depth = dp.row(2).transpose();
    let (x, y, z) = (p.x, p.y, p.z);
    let iz2 = 1.0 / (z * z);
    let iz3 = iz2 / z;
    let mut conic_t = [Matrix2::zeros(); 6];
    for (c, out) in conic_t.iter_mut().enumerate() {
        let d = dp.column(c);
        let mut dj = Matrix2x3::zeros();
        dj[(0, 0)] = -k.fx * d.z * iz2;
        dj[(0, 2)] = -k.fx * (d.x * iz2 - 2.0 * x * d.z * iz3);
        dj[(1, 1)] = -k.fy * d.z * iz2;
        dj[(1, 2)] = -k.fy * (d.y * iz2 - 2.0 * y * d.z * iz3);
        let mut d_cov = dj * sigma_cam * jac.transpose() + jac * sigma_cam * dj.transpose();
        if c >= 3 {
            let e = hat(&Vector3::ith(c - 3, 1.0));
            let d_sigma = e * sigma_cam + sigma_cam * e.transpose();
            d_cov += jac * d_sigma * jac.transpose();
        }
        *out = -(conic * d_cov * conic);
    }
    SplatTangent {
        mean,
        depth,
        conic: conic_t,
    }
}

/// Forward-mode derivative of every rendered pixel with respect to a
/// left-multiplied pose twist. Shares traversal with [`super::render`].
pub fn render_pose_jacobian(
    map: &GaussianMap,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
) -> PoseJacobian {
    let cfg = RenderConfig::default();
    let raster = Rasterization::build(map, pose, k, &cfg);
    let tangents: Vec<SplatTangent> = raster
        .splats
        .iter()
        .map(|s| splat_tangent(&s.p_cam, &s.sigma_cam, &s.jac, &s.conic, k))
        .collect();
    let (w, h) = k.dims();
    let mut color = Grid::new(w, h, [0.0; 3]);
    let mut depth = Grid::new(w, h, 0.0);
    let mut weight_sum = Grid::new(w, h, 0.0);
    let mut contributors = Grid::new(w, h, 0u32);
    let mut jacobian = Grid::new(w, h, PixelJacobian::zeros());
    let mut terms = Vec::new();
    for p in 0..w * h {
        let (u, v) = CameraIntrinsics::pixel_center(p % w, p / w);
        composite_pixel(&raster, p, &Vector2::new(u, v), &cfg, &mut terms);
        let mut c = Vector3::zeros();
        let mut d = 0.0;
        let mut ws = 0.0;
        let mut jp = PixelJacobian::zeros();
        let mut dt = Vector6::<f64>::zeros();
        for t in &terms {
            let si = t.splat as usize;
            let s = &raster.splats[si];
            let tg = &tangents[si];
            let mut da = Vector6::zeros();
            if !t.saturated {
                let ad = s.conic * t.delta;
                for col in 0..6 {
                    let dm = Vector2::new(tg.mean[(0, col)], tg.mean[(1, col)]);
                    let dq = -2.0 * ad.dot(&dm) + t.delta.dot(&(tg.conic[col] * t.delta));
                    da[col] = -0.5 * t.alpha * dq;
                }
            }
            let wgt = t.alpha * t.transmittance;
            let dw = da * t.transmittance + dt * t.alpha;
            for col in 0..6 {
                jp[(0, col)] += s.color.x * dw[col];
                jp[(1, col)] += s.color.y * dw[col];
                jp[(2, col)] += s.color.z * dw[col];
                jp[(3, col)] += s.p_cam.z * dw[col] + wgt * tg.depth[col];
            }
            c += s.color * wgt;
            d += s.p_cam.z * wgt;
            ws += wgt;
            dt = dt * (1.0 - t.alpha) - da * t.transmittance;
        }
        color.data_mut()[p] = [c.x, c.y, c.z];
        depth.data_mut()[p] = d;
        weight_sum.data_mut()[p] = ws;
        contributors.data_mut()[p] = terms.len() as u32;
        jacobian.data_mut()[p] = jp;
    }
    PoseJacobian {
        render: RenderOutput {
            color,
            depth,
            weight_sum,
            contributors,
        },
        jacobian,
    }
}
