//! Forward splatting of a [`GaussianMap`] into color and depth images, plus the
//! analytic reverse pass ([`render_backward`]) and a forward-mode pose Jacobian
//! ([`render_pose_jacobian`]).
//!
//! Pipeline per Gaussian: world → camera (`p_c = R p + t`), pinhole projection of
//! the center, and the local-affine covariance `Σ' = J W Σ Wᵀ Jᵀ + δI`. Pixels are
//! composited front to back by center depth, ties broken by Gaussian id.

mod backward;
mod jacobian;

pub use backward::{render_backward, render_backward_with, GaussianGrad, RenderGradients};
pub use jacobian::{render_pose_jacobian, PoseJacobian};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::scene_model::{
    CameraIntrinsics, ColorImage, DepthImage, Gaussian, GaussianId, GaussianMap, Grid, SE3Pose,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    /// Gaussians with camera-z at or below this are culled.
    pub near: f64,
    /// Added to the diagonal of the projected covariance (px²).
    pub cov_dilation: f64,
    pub max_alpha: f64,
    /// Half-width of the evaluation box in standard deviations.
    pub sigma_cutoff: f64,
    /// Stop compositing a pixel once transmittance drops below this.
    pub min_transmittance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            near: 0.01,
            cov_dilation: 0.3,
            max_alpha: 0.999,
            sigma_cutoff: 3.0,
            min_transmittance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub source_id: GaussianId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: ColorImage,
    /// Unnormalized: `Σ w_i d_i`.
    pub depth: DepthImage,
    pub weight_sum: Grid<f64>,
    pub contributors: Grid<u32>,
}

impl RenderOutput {
    /// Depth divided by accumulated weight where the weight exceeds `min_weight`,
    /// otherwise 0.
    pub fn normalized_depth(&self, min_weight: f64) -> DepthImage {
        Grid::from_vec(
            self.depth.width(),
            self.depth.height(),
            self.depth
                .data()
                .iter()
                .zip(self.weight_sum.data())
                .map(|(&d, &w)| if w > min_weight { d / w } else { 0.0 })
                .collect(),
        )
    }
}

/// Pinhole Jacobian of `(x, y, z) ↦ (fx x/z, fy y/z)`.
#[inline]
pub(crate) fn projection_jacobian(p: &Vector3<f64>, k: &CameraIntrinsics) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz2,
    )
}

/// Everything about one visible Gaussian the per-pixel loops need.
#[derive(Clone, Debug)]
pub(crate) struct Splat {
    /// Index into `GaussianMap::gaussians`.
    pub map_index: usize,
    pub id: GaussianId,
    pub p_cam: Vector3<f64>,
    pub mean: Vector2<f64>,
    pub conic: Matrix2<f64>,
    pub sigma_cam: Matrix3<f64>,
    pub jac: Matrix2x3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub x_range: (usize, usize),
    pub y_range: (usize, usize),
}

struct CameraSpace {
    p_cam: Vector3<f64>,
    sigma_cam: Matrix3<f64>,
    jac: Matrix2x3<f64>,
    cov2d: Matrix2<f64>,
}

fn to_camera_space(
    g: &Gaussian,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Option<CameraSpace> {
    let p_cam = pose.transform_point(&g.position);
    if !(p_cam.z > cfg.near) {
        return None;
    }
    let w = &pose.rotation;
    let sigma_cam = w * g.covariance() * w.transpose();
    let jac = projection_jacobian(&p_cam, k);
    let mut cov2d = jac * sigma_cam * jac.transpose();
    cov2d[(0, 1)] = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(1, 0)] = cov2d[(0, 1)];
    cov2d[(0, 0)] += cfg.cov_dilation;
    cov2d[(1, 1)] += cfg.cov_dilation;
    Some(CameraSpace {
        p_cam,
        sigma_cam,
        jac,
        cov2d,
    })
}

fn project_splat(
    map_index: usize,
    g: &Gaussian,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Option<Splat> {
    let cs = to_camera_space(g, pose, k, cfg)?;
    let conic = cs.cov2d.try_inverse()?;
    let mean = k.project(&cs.p_cam);
    if !(mean.x.is_finite() && mean.y.is_finite()) {
        return None;
    }
    let rx = cfg.sigma_cutoff * cs.cov2d[(0, 0)].sqrt();
    let ry = cfg.sigma_cutoff * cs.cov2d[(1, 1)].sqrt();
    let x_range = pixel_span(mean.x, rx, k.width)?;
    let y_range = pixel_span(mean.y, ry, k.height)?;
    Some(Splat {
        map_index,
        id: g.id,
        p_cam: cs.p_cam,
        mean,
        conic,
        sigma_cam: cs.sigma_cam,
        jac: cs.jac,
        opacity: g.opacity,
        color: g.color,
        x_range,
        y_range,
    })
}

/// Inclusive-exclusive range of pixel indices whose centers lie in `[c - r, c + r]`.
fn pixel_span(c: f64, r: f64, n: usize) -> Option<(usize, usize)> {
    let lo = (c - r - 0.5).ceil().max(0.0);
    let hi = (c + r - 0.5).floor().min(n as f64 - 1.0);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as usize, hi as usize + 1))
}

/// Project a single Gaussian; `None` when culled by the near plane.
pub fn project(g: &Gaussian, pose: &SE3Pose, k: &CameraIntrinsics) -> Option<ProjectedGaussian> {
    project_with(g, pose, k, &RenderConfig::default())
}

pub fn project_with(
    g: &Gaussian,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Option<ProjectedGaussian> {
    let cs = to_camera_space(g, pose, k, cfg)?;
    Some(ProjectedGaussian {
        mean2d: k.project(&cs.p_cam),
        cov2d: cs.cov2d,
        depth: cs.p_cam.z,
        source_id: g.id,
    })
}

/// Clamped splat value `o·exp(-½ Δᵀ Σ'⁻¹ Δ)` at a continuous pixel position.
pub fn pixel_weight(pg: &ProjectedGaussian, opacity: f64, pixel: &Vector2<f64>) -> f64 {
    let conic = pg
        .cov2d
        .try_inverse()
        .expect("dilated 2D covariance is invertible");
    let d = pixel - pg.mean2d;
    let q = d.dot(&(conic * d));
    alpha(opacity, q, RenderConfig::default().max_alpha)
}

#[inline]
pub(crate) fn alpha(opacity: f64, q: f64, max_alpha: f64) -> f64 {
    (opacity * (-0.5 * q).exp()).clamp(0.0, max_alpha)
}

/// Visible splats in compositing order and, for every pixel, the ordered list of
/// splats whose box covers it (CSR layout).
pub(crate) struct Rasterization {
    pub splats: Vec<Splat>,
    pub offsets: Vec<usize>,
    pub entries: Vec<u32>,
}

impl Rasterization {
    pub fn build(map: &GaussianMap, pose: &SE3Pose, k: &CameraIntrinsics, cfg: &RenderConfig) -> Self {
        let mut splats: Vec<Splat> = map
            .gaussians
            .iter()
            .enumerate()
            .filter(|(_, g)| g.alive)
            .filter_map(|(i, g)| project_splat(i, g, pose, k, cfg))
            .collect();
        splats.sort_by(|a, b| {
            a.p_cam
                .z
                .total_cmp(&b.p_cam.z)
                .then_with(|| a.id.cmp(&b.id))
        });

        let n_pix = k.width * k.height;
        let mut counts = vec![0usize; n_pix + 1];
        for s in &splats {
            for y in s.y_range.0..s.y_range.1 {
                for x in s.x_range.0..s.x_range.1 {
                    counts[y * k.width + x + 1] += 1;
                }
            }
        }
        for i in 1..=n_pix {
            counts[i] += counts[i - 1];
        }
        let offsets = counts;
        let mut cursor = offsets.clone();
        let mut entries = vec![0u32; offsets[n_pix]];
        for (si, s) in splats.iter().enumerate() {
            for y in s.y_range.0..s.y_range.1 {
                for x in s.x_range.0..s.x_range.1 {
                    let p = y * k.width + x;
                    entries[cursor[p]] = si as u32;
                    cursor[p] += 1;
                }
            }
        }
        Self {
            splats,
            offsets,
            entries,
        }
    }

    #[inline]
    pub fn pixel_list(&self, pixel: usize) -> &[u32] {
        &self.entries[self.offsets[pixel]..self.offsets[pixel + 1]]
    }
}

/// One composited term at a pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Contribution {
    pub splat: u32,
    /// Clamped alpha.
    pub alpha: f64,
    /// Transmittance before this term.
    pub transmittance: f64,
    /// Whether `alpha` hit the upper clamp.
    pub saturated: bool,
    /// Mahalanobis offset `Δ = pixel - mean`.
    pub delta: Vector2<f64>,
}

/// Front-to-back traversal of one pixel, recording each composited term.
#[inline]
pub(crate) fn composite_pixel(
    raster: &Rasterization,
    pixel: usize,
    px: &Vector2<f64>,
    cfg: &RenderConfig,
    out: &mut Vec<Contribution>,
) -> f64 {
    out.clear();
    let mut t = 1.0;
    for &si in raster.pixel_list(pixel) {
        let s = &raster.splats[si as usize];
        let d = px - s.mean;
        let q = d.dot(&(s.conic * d));
        let raw = s.opacity * (-0.5 * q).exp();
        let saturated = raw > cfg.max_alpha;
        let a = raw.clamp(0.0, cfg.max_alpha);
        out.push(Contribution {
            splat: si,
            alpha: a,
            transmittance: t,
            saturated,
            delta: d,
        });
        t *= 1.0 - a;
        if t < cfg.min_transmittance {
            break;
        }
    }
    t
}

pub fn render(map: &GaussianMap, pose: &SE3Pose, k: &CameraIntrinsics) -> RenderOutput {
    render_with(map, pose, k, &RenderConfig::default())
}

pub fn render_with(
    map: &GaussianMap,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> RenderOutput {
    let raster = Rasterization::build(map, pose, k, cfg);
    let (w, h) = k.dims();
    let mut color = Grid::new(w, h, [0.0; 3]);
    let mut depth = Grid::new(w, h, 0.0);
    let mut weight_sum = Grid::new(w, h, 0.0);
    let mut contributors = Grid::new(w, h, 0u32);
    let mut terms = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (u, v) = CameraIntrinsics::pixel_center(x, y);
            composite_pixel(&raster, p, &Vector2::new(u, v), cfg, &mut terms);
            let mut c = [0.0; 3];
            let mut d = 0.0;
            let mut ws = 0.0;
            for t in &terms {
                let s = &raster.splats[t.splat as usize];
                let wgt = t.alpha * t.transmittance;
                c[0] += wgt * s.color.x;
                c[1] += wgt * s.color.y;
                c[2] += wgt * s.color.z;
                d += wgt * s.p_cam.z;
                ws += wgt;
            }
            color.data_mut()[p] = c;
            depth.data_mut()[p] = d;
            weight_sum.data_mut()[p] = ws;
            contributors.data_mut()[p] = terms.len() as u32;
        }
    }
    RenderOutput {
        color,
        depth,
        weight_sum,
        contributors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Quaternion;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 8.0, 8.0, 16, 16).unwrap()
    }

    fn gauss(pos: [f64; 3], sigma: f64, opacity: f64, color: [f64; 3]) -> Gaussian {
        Gaussian::isotropic(
            Vector3::from_row_slice(&pos),
            sigma,
            opacity,
            Vector3::from_row_slice(&color),
        )
    }

    #[test]
    fn on_axis_projection() {
        let g = gauss([0.0, 0.0, 2.0], 0.1, 0.5, [1.0; 3]);
        let pg = project(&g, &SE3Pose::identity(), &cam()).unwrap();
        assert_eq!(pg.mean2d, Vector2::new(8.0, 8.0));
        // (100 * 0.1 / 2)² + 0.3
        assert!((pg.cov2d[(0, 0)] - 25.3).abs() < 1e-12);
        assert!((pg.cov2d[(1, 1)] - 25.3).abs() < 1e-12);
        assert!(pg.cov2d[(0, 1)].abs() < 1e-12);
        assert_eq!(pg.depth, 2.0);
    }

    #[test]
    fn behind_camera_is_culled() {
        let g = gauss([0.0, 0.0, -1.0], 0.1, 0.5, [1.0; 3]);
        assert!(project(&g, &SE3Pose::identity(), &cam()).is_none());
        let g = gauss([0.0, 0.0, 0.005], 0.1, 0.5, [1.0; 3]);
        assert!(project(&g, &SE3Pose::identity(), &cam()).is_none());
    }

    #[test]
    fn pixel_weight_values() {
        let pg = ProjectedGaussian {
            mean2d: Vector2::new(3.0, 4.0),
            cov2d: Matrix2::new(4.0, 0.0, 0.0, 1.0),
            depth: 1.0,
            source_id: 0,
        };
        assert_eq!(pixel_weight(&pg, 0.7, &Vector2::new(3.0, 4.0)), 0.7);
        // Mahalanobis distance 3 along x: Δx = 3·σx = 6
        let w = pixel_weight(&pg, 1.0, &Vector2::new(9.0, 4.0));
        assert!((w - (-4.5f64).exp()).abs() < 1e-15);
        assert!((w - 0.0111).abs() < 1e-4);
        assert_eq!(pixel_weight(&pg, 0.0, &Vector2::new(3.5, 4.0)), 0.0);
        assert_eq!(pixel_weight(&pg, 1.0, &Vector2::new(3.0, 4.0)), 0.999);
    }

    #[test]
    fn single_gaussian_at_mean_pixel() {
        // mean exactly on the center of pixel (8, 8)
        let k = CameraIntrinsics::new(100.0, 100.0, 8.5, 8.5, 16, 16).unwrap();
        let mut map = GaussianMap::new();
        map.insert(gauss([0.0, 0.0, 2.0], 0.05, 0.5, [0.2, 0.4, 0.6]));
        let out = render(&map, &SE3Pose::identity(), &k);
        let c = out.color.get(8, 8);
        assert!((c[0] - 0.1).abs() < 1e-15 && (c[1] - 0.2).abs() < 1e-15 && (c[2] - 0.3).abs() < 1e-15);
        assert!((out.depth.get(8, 8) - 1.0).abs() < 1e-15);
        assert_eq!(*out.contributors.get(8, 8), 1);
    }

    #[test]
    fn two_coincident_gaussians() {
        let k = CameraIntrinsics::new(100.0, 100.0, 8.5, 8.5, 16, 16).unwrap();
        let mut map = GaussianMap::new();
        // farther one inserted first
        map.insert(gauss([0.0, 0.0, 3.0], 0.05, 0.5, [0.0, 1.0, 0.0]));
        map.insert(gauss([0.0, 0.0, 2.0], 0.05, 0.5, [1.0, 0.0, 0.0]));
        let out = render(&map, &SE3Pose::identity(), &k);
        let c = out.color.get(8, 8);
        assert!((c[0] - 0.5).abs() < 1e-15);
        assert!((c[1] - 0.25).abs() < 1e-15);
        assert!((out.depth.get(8, 8) - (0.5 * 2.0 + 0.25 * 3.0)).abs() < 1e-15);
        assert!((out.weight_sum.get(8, 8) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn empty_map_renders_zero() {
        let out = render(&GaussianMap::new(), &SE3Pose::identity(), &cam());
        assert!(out.color.data().iter().all(|c| *c == [0.0; 3]));
        assert!(out.depth.data().iter().all(|&d| d == 0.0));
        assert!(out.weight_sum.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn pruned_gaussians_are_not_rendered() {
        let mut map = GaussianMap::new();
        map.insert(gauss([0.0, 0.0, 2.0], 0.05, 0.5, [1.0; 3]));
        map.gaussians[0].alive = false;
        let out = render(&map, &SE3Pose::identity(), &cam());
        assert!(out.weight_sum.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn front_gaussian_dominates_after_depth_swap() {
        let k = CameraIntrinsics::new(100.0, 100.0, 8.5, 8.5, 16, 16).unwrap();
        let mk = |da: f64, db: f64| {
            let mut map = GaussianMap::new();
            map.insert(gauss([0.0, 0.0, da], 0.02, 0.6, [1.0, 0.0, 0.0]));
            map.insert(gauss([0.0, 0.0, db], 0.02, 0.6, [0.0, 1.0, 0.0]));
            *render(&map, &SE3Pose::identity(), &k).color.get(8, 8)
        };
        let a_front = mk(2.0, 3.0);
        let a_back = mk(3.0, 2.0);
        assert!((a_front[0] - 0.6).abs() < 1e-12);
        assert!(a_front[0] >= a_back[0]);
        assert!(a_back[1] >= a_front[1]);
    }

    #[test]
    fn rotated_gaussian_projects_anisotropically() {
        let mut g = gauss([0.0, 0.0, 2.0], 0.1, 0.5, [1.0; 3]);
        g.scale = Vector3::new(0.2, 0.05, 0.05);
        let half = std::f64::consts::FRAC_PI_4;
        g.rotation = Quaternion::new(half.cos(), 0.0, 0.0, half.sin());
        let pg = project(&g, &SE3Pose::identity(), &cam()).unwrap();
        // rotated 90° about z: long axis along y
        assert!(pg.cov2d[(1, 1)] > pg.cov2d[(0, 0)]);
    }
}
