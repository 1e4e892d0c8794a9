//! Deterministic synthetic dynamic scenes.
//!
//! A textured background wall of Gaussians is observed by a moving camera while
//! rigid objects move in front of it. Frames, depth and dynamic masks are
//! rendered with the splatting renderer; flow comes from transforming each
//! back-projected pixel through the camera (and, on object pixels, the object)
//! motion. Sensor emulation then corrupts depth scale, depth, flow and masks the
//! way learned estimators would.

mod trajectory;

pub use trajectory::MotionSpec;

use std::f64::consts::PI;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BACKGROUND_NEAR: f64 = 2.0;
const BACKGROUND_FAR: f64 = 6.0;
const VIEW_MARGIN: f64 = 1.3;
use crate::scene_model::{
    CameraIntrinsics, DepthImage, FlowField, Frame, Gaussian, GaussianMap, Grid, MaskImage, SE3Pose,
};
use crate::io_eval::Trajectory;
use crate::splat_renderer::render;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub n_gaussians: usize,
    /// Object center in world coordinates at frame 0.
    pub center: [f64; 3],
    /// Radius of the ball the object's Gaussians are drawn from (m).
    pub extent: f64,
    /// Object-to-world motion relative to its frame-0 placement.
    pub motion: MotionSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation of additive flow noise (px).
    pub flow_sigma: f64,
    /// Standard deviation of multiplicative per-pixel depth noise.
    pub depth_noise_rel: f64,
    /// Per-frame unknown monocular depth scale drawn uniformly from this range.
    pub depth_scale_range: (f64, f64),
    /// Probability that a static pixel is reported dynamic.
    pub mask_flip_fp: f64,
    /// Probability that a dynamic pixel is reported static.
    pub mask_flip_fn: f64,
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            flow_sigma: 0.0,
            depth_noise_rel: 0.0,
            depth_scale_range: (1.0, 1.0),
            mask_flip_fp: 0.0,
            mask_flip_fn: 0.0,
        }
    }

    pub fn moderate() -> Self {
        Self {
            flow_sigma: 0.2,
            depth_noise_rel: 0.01,
            depth_scale_range: (0.8, 1.25),
            mask_flip_fp: 0.02,
            mask_flip_fn: 0.02,
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::moderate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub n_background: usize,
    pub objects: Vec<ObjectSpec>,
    /// Camera-to-world motion relative to the frame-0 camera, which sits at the
    /// world origin looking down +z.
    pub camera: MotionSpec,
    pub n_frames: usize,
    pub fps: f64,
    pub noise: NoiseConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            intrinsics: CameraIntrinsics::new(60.0, 60.0, 32.0, 32.0, 64, 64).expect("valid"),
            n_background: 200,
            objects: vec![ObjectSpec {
                n_gaussians: 30,
                center: [0.05, 0.05, 1.6],
                extent: 0.2,
                // travels with the camera, sways sideways and bobs in depth
                motion: MotionSpec {
                    velocity: [0.025, 0.008, 0.004, 0.0, 0.0, 0.0],
                    amplitude: [0.15, 0.08, 0.0, 0.0, 0.0, 0.2],
                    period: [40.0, 25.0, 1.0, 1.0, 1.0, 30.0],
                    triangle: [0.0, 0.0, 0.3, 0.0, 0.0, 0.0],
                    triangle_period: 4.0,
                },
            }],
            camera: MotionSpec {
                velocity: [0.025, 0.008, 0.004, 0.0, 0.0, 0.0],
                amplitude: [0.03, 0.02, 0.02, 0.015, 0.015, 0.01],
                period: [30.0, 20.0, 25.0, 25.0, 35.0, 40.0],
                triangle: [0.0; 6],
                triangle_period: 1.0,
            },
            n_frames: 60,
            fps: 30.0,
            noise: NoiseConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.n_frames < 2 {
            return Err(Error::Config("n_frames must be at least 2".into()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Config(format!("fps {} must be positive", self.fps)));
        }
        self.camera.validate().map_err(|e| Error::Config(format!("camera motion: {e}")))?;
        for (i, o) in self.objects.iter().enumerate() {
            o.motion.validate().map_err(|e| Error::Config(format!("object {i} motion: {e}")))?;
            if !(o.extent > 0.0 && o.extent.is_finite()) || o.n_gaussians == 0 {
                return Err(Error::Config(format!("object {i} needs Gaussians and a positive extent")));
            }
        }
        let n = &self.noise;
        let rates = [n.mask_flip_fp, n.mask_flip_fn];
        if rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("mask flip rates must be in [0, 1)".into()));
        }
        if !(n.flow_sigma >= 0.0 && n.depth_noise_rel >= 0.0 && n.depth_noise_rel < 1.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        let (lo, hi) = n.depth_scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("depth scale range ({lo}, {hi}) invalid")));
        }
        Ok(())
    }
}

/// Ground truth and emulated estimator outputs of one simulated sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SimBundle {
    pub intrinsics: CameraIntrinsics,
    /// Background plus objects at their frame-0 placement.
    pub gt_map: GaussianMap,
    /// Number of leading background Gaussians in `gt_map`.
    pub n_background: usize,
    /// World-to-camera pose per frame.
    pub gt_poses: Vec<SE3Pose>,
    /// Object-to-world motion per object and frame.
    pub object_poses: Vec<Vec<SE3Pose>>,
    /// Rendered frames; depth and flow fields hold the emulated estimates once
    /// [`emulate_sensors`] has run.
    pub frames: Vec<Frame>,
    pub gt_depth: Vec<DepthImage>,
    /// Flow from each frame to the next; the last frame has none.
    pub gt_flow: Vec<FlowField>,
    pub gt_dyn_mask: Vec<MaskImage>,
    pub est_depth: Vec<DepthImage>,
    pub est_flow: Vec<FlowField>,
    pub est_flow_mask: Vec<MaskImage>,
    /// Emulated depth-cue mask, corrupted like `est_flow_mask`.
    pub est_depth_mask: Vec<MaskImage>,
    /// Per-frame monocular scale applied to `est_depth`.
    pub depth_scales: Vec<f64>,
}

impl SimBundle {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The map as it looks at frame `i`: objects moved to their pose.
    pub fn map_at(&self, i: usize) -> GaussianMap {
        let mut map = self.gt_map.clone();
        let mut offset = self.n_background;
        let counts: Vec<usize> = self.object_counts();
        for (o, &n) in counts.iter().enumerate() {
            let m = &self.object_poses[o][i];
            for g in &mut map.gaussians[offset..offset + n] {
                move_gaussian(g, m);
            }
            offset += n;
        }
        map
    }

    /// Static part of the map only.
    pub fn background_map(&self) -> GaussianMap {
        let mut map = self.gt_map.clone();
        for g in &mut map.gaussians[self.n_background..] {
            g.alive = false;
        }
        map
    }

    fn object_counts(&self) -> Vec<usize> {
        let total = self.gt_map.len() - self.n_background;
        let n_obj = self.object_poses.len();
        if n_obj == 0 {
            return Vec::new();
        }
        // objects are stored contiguously with their anchor set to the object index
        let mut counts = vec![0; n_obj];
        for g in &self.gt_map.gaussians[self.n_background..] {
            counts[g.anchor_keyframe] += 1;
        }
        debug_assert_eq!(counts.iter().sum::<usize>(), total);
        counts
    }

    /// Camera-to-world trajectory with timestamps.
    /// Ground-truth camera trajectory in TUM convention.
    pub fn gt_trajectory(&self) -> Result<Trajectory> {
        Trajectory::from_world_to_camera(self.frames.iter().map(|f| f.timestamp).zip(&self.gt_poses))
    }
}

fn move_gaussian(g: &mut Gaussian, m: &SE3Pose) {
    g.position = m.transform_point(&g.position);
    let r = UnitQuaternion::from_matrix(&m.rotation);
    let q = r.into_inner() * g.rotation;
    g.rotation = q / q.norm();
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Quaternion<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let q = Quaternion::new(n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng));
    let q = q / q.norm();
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

fn background(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
    let n = cfg.n_background;
    if n == 0 {
        return Vec::new();
    }
    let k = &cfg.intrinsics;
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    // the wall spans every view along the camera path at every depth
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for i in 0..cfg.n_frames {
        let c = cfg.camera.pose(i as f64).translation;
        lo = lo.inf(&c);
        hi = hi.sup(&c);
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (cx, cy) = ((i % cols) as f64, (i / cols) as f64);
        let z = rng.random_range(BACKGROUND_NEAR..BACKGROUND_FAR);
        let half_w = VIEW_MARGIN * z * (k.width as f64 * 0.5) / k.fx;
        let half_h = VIEW_MARGIN * z * (k.height as f64 * 0.5) / k.fy;
        let (x0, x1) = (lo.x - half_w, hi.x + half_w);
        let (y0, y1) = (lo.y - half_h, hi.y + half_h);
        let cell_w = (x1 - x0) / cols as f64;
        let cell_h = (y1 - y0) / rows as f64;
        let x = x0 + (cx + rng.random_range(0.2..0.8)) * cell_w;
        let y = y0 + (cy + rng.random_range(0.2..0.8)) * cell_h;
        let base = cell_w.max(cell_h);
        let scale = Vector3::new(
            rng.random_range(0.7..1.1) * base,
            rng.random_range(0.7..1.1) * base,
            rng.random_range(0.2..0.5) * base,
        );
        let color = Vector3::new(
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
        );
        out.push(Gaussian {
            id: 0,
            position: Vector3::new(x, y, z + lo.z),
            // in-plane only so the flattened axis keeps facing the camera
            rotation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rng.random_range(0.0..PI))
                .into_inner(),
            scale,
            opacity: rng.random_range(0.95..0.995),
            color,
            anchor_keyframe: 0,
            alive: true,
        });
    }
    out
}

fn object(spec: &ObjectSpec, index: usize, rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
    let c = Vector3::from_row_slice(&spec.center);
    let sigma = spec.extent * 0.45;
    let hue = rng.random_range(0.0..1.0);
    (0..spec.n_gaussians)
        .map(|_| {
            let dir = loop {
                let v = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if v.norm_squared() <= 1.0 {
                    break v;
                }
            };
            let shade: f64 = rng.random_range(0.6..1.0);
            let color = Vector3::new(
                (0.9 * shade).min(1.0),
                (0.25 + 0.5 * hue) * shade,
                (0.15 + 0.3 * (1.0 - hue)) * shade,
            );
            Gaussian {
                id: 0,
                position: c + dir * spec.extent,
                rotation: random_rotation(rng),
                scale: Vector3::new(
                    rng.random_range(0.7..1.3) * sigma,
                    rng.random_range(0.7..1.3) * sigma,
                    rng.random_range(0.7..1.3) * sigma,
                ),
                opacity: rng.random_range(0.95..0.995),
                color,
                anchor_keyframe: index,
                alive: true,
            }
        })
        .collect()
}

/// Ground-truth half of a [`SimBundle`]; the estimate fields are copies of the
/// ground truth until [`emulate_sensors`] runs.
pub fn make_scene(cfg: &SimConfig) -> Result<SimBundle> {
    cfg.validate()?;
    let k = cfg.intrinsics;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gt_map = GaussianMap::new();
    gt_map.extend(background(cfg, &mut rng));
    let n_background = gt_map.len();
    for (i, spec) in cfg.objects.iter().enumerate() {
        gt_map.extend(object(spec, i, &mut rng));
    }

    let n = cfg.n_frames;
    let gt_poses: Vec<SE3Pose> = (0..n).map(|i| cfg.camera.pose(i as f64).inverse()).collect();
    let object_poses: Vec<Vec<SE3Pose>> = cfg
        .objects
        .iter()
        .map(|o| {
            let c = Vector3::from_row_slice(&o.center);
            let to_center = SE3Pose::from_translation(c);
            let from_center = SE3Pose::from_translation(-c);
            (0..n)
                .map(|i| to_center.compose(&o.motion.pose(i as f64)).compose(&from_center))
                .collect()
        })
        .collect();

    let mut bundle = SimBundle {
        intrinsics: k,
        gt_map,
        n_background,
        gt_poses,
        object_poses,
        frames: Vec::with_capacity(n),
        gt_depth: Vec::with_capacity(n),
        gt_flow: Vec::with_capacity(n),
        gt_dyn_mask: Vec::with_capacity(n),
        est_depth: Vec::new(),
        est_flow: Vec::new(),
        est_flow_mask: Vec::new(),
        est_depth_mask: Vec::new(),
        depth_scales: vec![1.0; n],
    };

    for i in 0..n {
        let map = bundle.map_at(i);
        let pose = bundle.gt_poses[i];
        let out = render(&map, &pose, &k);
        let mut indicator = map.clone();
        for (j, g) in indicator.gaussians.iter_mut().enumerate() {
            g.color = if j >= n_background { Vector3::new(1.0, 0.0, 0.0) } else { Vector3::zeros() };
        }
        let obj_w = render(&indicator, &pose, &k).color;
        let mask = Grid::from_vec(
            k.width,
            k.height,
            obj_w
                .data()
                .iter()
                .zip(out.weight_sum.data())
                .map(|(c, &w)| w > 0.0 && c[0] > 0.5 * w)
                .collect(),
        );
        let mut frame = Frame::new(i, i as f64 / cfg.fps, out.color);
        frame.est_depth = Some(out.depth.clone());
        frame.is_keyframe = crate::tracker::keyframe_policy(i);
        bundle.frames.push(frame);
        bundle.gt_depth.push(out.depth);
        bundle.gt_dyn_mask.push(mask);
    }

    for i in 0..n - 1 {
        let flow = point_transform_flow(&bundle, i);
        bundle.frames[i].flow_to_next = Some(flow.clone());
        bundle.gt_flow.push(flow);
    }
    bundle.est_depth = bundle.gt_depth.clone();
    bundle.est_flow = bundle.gt_flow.clone();
    bundle.est_flow_mask = bundle.gt_dyn_mask.clone();
    bundle.est_depth_mask = bundle.gt_dyn_mask.clone();
    Ok(bundle)
}

/// The object owning a dynamic pixel: the one with the largest compositing
/// weight there.
fn owning_object(x: usize, y: usize, weights: &[Grid<f64>]) -> usize {
    let mut best = (0, f64::MIN);
    for (o, w) in weights.iter().enumerate() {
        let v = *w.get(x, y);
        if v > best.1 {
            best = (o, v);
        }
    }
    best.0
}

fn point_transform_flow(bundle: &SimBundle, i: usize) -> FlowField {
    let k = &bundle.intrinsics;
    let t_cw0 = &bundle.gt_poses[i];
    let t_wc0 = t_cw0.inverse();
    let t_cw1 = &bundle.gt_poses[i + 1];
    let depth = &bundle.gt_depth[i];
    let mask = &bundle.gt_dyn_mask[i];
    let n_obj = bundle.object_poses.len();
    let weights: Vec<Grid<f64>> = if n_obj > 1 {
        (0..n_obj)
            .map(|o| {
                let mut ind = bundle.map_at(i);
                for (j, g) in ind.gaussians.iter_mut().enumerate() {
                    let mine = j >= bundle.n_background && g.anchor_keyframe == o;
                    g.color = if mine { Vector3::new(1.0, 0.0, 0.0) } else { Vector3::zeros() };
                }
                render(&ind, t_cw0, k).color.map(|c| c[0])
            })
            .collect()
    } else {
        Vec::new()
    };
    let step: Vec<SE3Pose> = bundle
        .object_poses
        .iter()
        .map(|poses| poses[i + 1].compose(&poses[i].inverse()))
        .collect();
    Grid::from_fn(k.width, k.height, |x, y| {
        let d = *depth.get(x, y);
        if !(d > 0.0) {
            return [0.0, 0.0];
        }
        let (u, v) = CameraIntrinsics::pixel_center(x, y);
        let mut pw = t_wc0.transform_point(&k.backproject(u, v, d));
        if *mask.get(x, y) && n_obj > 0 {
            let o = if n_obj > 1 { owning_object(x, y, &weights) } else { 0 };
            pw = step[o].transform_point(&pw);
        }
        let q = t_cw1.transform_point(&pw);
        if q.z <= 1e-9 {
            return [0.0, 0.0];
        }
        let p = k.project(&q);
        [p.x - u, p.y - v]
    })
}

fn flip(mask: &MaskImage, fp: f64, fn_: f64, rng: &mut ChaCha8Rng) -> MaskImage {
    mask.map(|&b| {
        let r: f64 = rng.random();
        if b {
            r >= fn_
        } else {
            r < fp
        }
    })
}

/// Corrupt the ground truth the way monocular estimators would. All draws come
/// from a generator seeded by `cfg.seed` in a fixed order: per frame the depth
/// scale, per-pixel depth noise, flow noise, then flow-mask and depth-mask flips.
pub fn emulate_sensors(bundle: &mut SimBundle, cfg: &SimConfig) -> Result<()> {
    cfg.validate()?;
    let noise = &cfg.noise;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let depth_noise = Normal::new(0.0, noise.depth_noise_rel).map_err(|e| Error::Config(e.to_string()))?;
    let flow_noise = Normal::new(0.0, noise.flow_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let (lo, hi) = noise.depth_scale_range;
    let n = bundle.len();
    bundle.est_depth.clear();
    bundle.est_flow.clear();
    bundle.est_flow_mask.clear();
    bundle.est_depth_mask.clear();
    for i in 0..n {
        let scale = if hi > lo { rng.random_range(lo..hi) } else { lo };
        bundle.depth_scales[i] = scale;
        let depth = bundle.gt_depth[i].map(|&d| {
            let e: f64 = depth_noise.sample(&mut rng);
            if d > 0.0 {
                (d * scale * (1.0 + e)).max(1e-6)
            } else {
                0.0
            }
        });
        let flow = bundle.gt_flow.get(i).map(|f| {
            f.map(|v| {
                let a: f64 = flow_noise.sample(&mut rng);
                let b: f64 = flow_noise.sample(&mut rng);
                [v[0] + a, v[1] + b]
            })
        });
        let fm = flip(&bundle.gt_dyn_mask[i], noise.mask_flip_fp, noise.mask_flip_fn, &mut rng);
        let dm = flip(&bundle.gt_dyn_mask[i], noise.mask_flip_fp, noise.mask_flip_fn, &mut rng);
        bundle.frames[i].est_depth = Some(depth.clone());
        bundle.frames[i].flow_to_next = flow.clone();
        bundle.est_depth.push(depth);
        if let Some(f) = flow {
            bundle.est_flow.push(f);
        }
        bundle.est_flow_mask.push(fm);
        bundle.est_depth_mask.push(dm);
    }
    Ok(())
}

/// `make_scene` followed by `emulate_sensors`.
pub fn simulate(cfg: &SimConfig) -> Result<SimBundle> {
    let mut b = make_scene(cfg)?;
    emulate_sensors(&mut b, cfg)?;
    Ok(b)
}
