#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use nalgebra::{Quaternion, Vector3, Vector6};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dynsplat::dyn_sim::{simulate, SimConfig};
use dynsplat::error::Error;
use dynsplat::io_eval::{
    decode_flo, encode_flo, evaluate_run, parse_trajectory, psnr, read_depth_png, trajectory_to_string,
    write_depth_png, Config, Dataset, EvalReport, Trajectory, TrajectoryEntry, DEPTH_SCALE,
};
use dynsplat::mapper::{packet_loss, KeyframePacket, Mapper, MapperConfig, MaskedLossWeights};
use dynsplat::mask_fusion::{fuse, mask_scores, posterior, PosteriorParams, DEFAULT_K_MAX};
use dynsplat::pipeline::{run_pipeline, PipelineConfig, PipelineOutput};
use dynsplat::scene_model::{
    CameraIntrinsics, Frame, Gaussian, GaussianMap, Grid, MaskImage, SE3Pose,
};
use dynsplat::splat_renderer::{pixel_weight, project, render, render_backward};
use dynsplat::tracker::{
    keyframe_policy, local_bundle_adjust, motion_loss, motion_loss_terms, static_mask, tracking_loss,
    KeyframeGroup, ScaleFactor, TrackingLossTerms,
};

/// Result of one acceptance criterion.
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_unit_quaternion(r: &mut ChaCha8Rng) -> Quaternion<f64> {
    let q = Quaternion::new(
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
    );
    q / q.norm()
}

fn random_twist(r: &mut ChaCha8Rng, scale: f64) -> Vector6<f64> {
    Vector6::from_fn(|_, _| r.random_range(-scale..scale))
}

/// Up to `max_n` Gaussians in front of a 16×16 camera near the identity pose.
pub fn random_scene(r: &mut ChaCha8Rng, max_n: usize) -> (GaussianMap, SE3Pose, CameraIntrinsics) {
    let k = CameraIntrinsics::new(18.0, 18.0, 8.0, 8.0, 16, 16).unwrap();
    let n = r.random_range(1..=max_n);
    let mut map = GaussianMap::new();
    for _ in 0..n {
        let z: f64 = r.random_range(1.5..4.0);
        let g = Gaussian {
            id: 0,
            position: Vector3::new(r.random_range(-0.4..0.4) * z, r.random_range(-0.4..0.4) * z, z),
            rotation: random_unit_quaternion(r),
            scale: Vector3::new(
                r.random_range(0.05..0.25),
                r.random_range(0.05..0.25),
                r.random_range(0.05..0.25),
            ),
            opacity: r.random_range(0.1..0.9),
            color: Vector3::new(r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)),
            anchor_keyframe: 0,
            alive: true,
        };
        map.insert(g);
    }
    (map, SE3Pose::exp(&random_twist(r, 0.05)), k)
}

fn random_packet(r: &mut ChaCha8Rng, pose: SE3Pose, k: &CameraIntrinsics) -> KeyframePacket {
    let (w, h) = k.dims();
    let color = Grid::from_fn(w, h, |_, _| {
        [r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)]
    });
    let depth = Grid::from_fn(w, h, |_, _| if r.random_bool(0.1) { 0.0 } else { r.random_range(1.0..5.0) });
    let mask = Grid::from_fn(w, h, |_, _| r.random_bool(0.3));
    let mut frame = Frame::new(0, 0.0, color);
    frame.est_depth = Some(depth.clone());
    KeyframePacket {
        frame,
        pose,
        fused_mask: mask,
        scaled_depth: depth,
    }
}

fn random_weights(r: &mut ChaCha8Rng) -> MaskedLossWeights {
    MaskedLossWeights {
        lambda_d: r.random_range(0.2..2.0),
        lambda_s: r.random_range(0.2..2.0),
        lambda_t: r.random_range(0.2..2.0),
        lambda_m: r.random_range(0.2..2.0),
        lambda_g: r.random_range(0.2..2.0),
    }
}

fn distance_to_integer(v: f64) -> f64 {
    (v - v.round()).abs()
}

/// Scenes where a step of `1e-5` in any parameter cannot cross a kink of the
/// loss: splat box edges keep clear of pixel centers, depths stay distinct,
/// no pixel saturates and no residual sits at zero.
fn is_smooth(map: &GaussianMap, pkt: &KeyframePacket, k: &CameraIntrinsics) -> bool {
    const MARGIN: f64 = 2e-3;
    let mut depths = Vec::new();
    for g in &map.gaussians {
        let Some(p) = project(g, &pkt.pose, k) else {
            return false;
        };
        for (c, var) in [(p.mean2d.x, p.cov2d[(0, 0)]), (p.mean2d.y, p.cov2d[(1, 1)])] {
            let r = 3.0 * var.sqrt();
            if distance_to_integer(c - r - 0.5) < MARGIN || distance_to_integer(c + r - 0.5) < MARGIN {
                return false;
            }
        }
        depths.push(p.depth);
    }
    depths.sort_by(f64::total_cmp);
    if depths.windows(2).any(|w| w[1] - w[0] < 1e-3) {
        return false;
    }
    let out = render(map, &pkt.pose, k);
    if out.weight_sum.data().iter().any(|&w| w > 0.999) {
        return false;
    }
    let color_kink = out
        .color
        .data()
        .iter()
        .zip(pkt.frame.color.data())
        .any(|(a, b)| (0..3).any(|c| (a[c] - b[c]).abs() < 1e-4));
    let depth_kink = out
        .depth
        .data()
        .iter()
        .zip(pkt.scaled_depth.data())
        .any(|(a, &b)| b > 0.0 && (a - b).abs() < 1e-4);
    !(color_kink || depth_kink)
}

pub struct GradientReport {
    pub scenes: usize,
    pub checks: usize,
    pub failures: Vec<String>,
    pub worst_ratio: f64,
}

const FD_STEP: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_ABS_FLOOR: f64 = 1e-7;

fn gradient_matches(analytic: f64, fd: f64) -> (bool, f64) {
    let allowed = (GRAD_REL_TOL * analytic.abs().max(fd.abs())).max(GRAD_ABS_FLOOR);
    let err = (analytic - fd).abs();
    (err <= allowed, err / allowed)
}

/// Analytic derivatives of `L_G` for every Gaussian parameter and the pose
/// against central differences.
pub fn gradient_suite(n_scenes: usize, seed: u64) -> GradientReport {
    let mut r = rng(seed);
    let mut report = GradientReport {
        scenes: 0,
        checks: 0,
        failures: Vec::new(),
        worst_ratio: 0.0,
    };
    while report.scenes < n_scenes {
        let (map, pose, k) = random_scene(&mut r, 20);
        let pkt = random_packet(&mut r, pose, &k);
        let w = random_weights(&mut r);
        if !is_smooth(&map, &pkt, &k) {
            continue;
        }
        let scene = report.scenes;
        report.scenes += 1;
        let loss = |m: &GaussianMap, p: &KeyframePacket| packet_loss(m, p, &k, &w, false).unwrap().0;
        let (_, upstream) = packet_loss(&map, &pkt, &k, &w, true).unwrap();
        let grads = render_backward(&map, &pose, &k, &upstream.unwrap());

        let mut check = |name: String, analytic: f64, fd: f64| {
            report.checks += 1;
            let (ok, ratio) = gradient_matches(analytic, fd);
            report.worst_ratio = report.worst_ratio.max(ratio);
            if !ok {
                report.failures.push(format!("scene {scene} {name}: analytic {analytic:e} fd {fd:e}"));
            }
        };

        for (gi, g) in grads.gaussians.iter().enumerate() {
            let analytic: Vec<(String, f64)> = (0..3)
                .map(|a| (format!("g{gi} position[{a}]"), g.position[a]))
                .chain((0..4).map(|a| (format!("g{gi} rotation[{a}]"), g.rotation.coords[a])))
                .chain((0..3).map(|a| (format!("g{gi} scale[{a}]"), g.scale[a])))
                .chain(std::iter::once((format!("g{gi} opacity"), g.opacity)))
                .chain((0..3).map(|a| (format!("g{gi} color[{a}]"), g.color[a])))
                .collect();
            for (p, (name, a)) in analytic.into_iter().enumerate() {
                let nudge = |h: f64| {
                    let mut m = map.clone();
                    let t = &mut m.gaussians[gi];
                    match p {
                        0..=2 => t.position[p] += h,
                        3..=6 => t.rotation.coords[p - 3] += h,
                        7..=9 => t.scale[p - 7] += h,
                        10 => t.opacity += h,
                        _ => t.color[p - 11] += h,
                    }
                    loss(&m, &pkt)
                };
                let fd = (nudge(FD_STEP) - nudge(-FD_STEP)) / (2.0 * FD_STEP);
                check(name, a, fd);
            }
        }
        for axis in 0..6 {
            let nudge = |h: f64| {
                let mut e = Vector6::zeros();
                e[axis] = h;
                let mut p = pkt.clone();
                p.pose = pose.retract(&e);
                loss(&map, &p)
            };
            let fd = (nudge(FD_STEP) - nudge(-FD_STEP)) / (2.0 * FD_STEP);
            check(format!("pose[{axis}]"), grads.pose[axis], fd);
        }
    }
    report
}

pub fn criterion_gradients() -> Outcome {
    let rep = gradient_suite(24, 1);
    Outcome::new(
        rep.failures.is_empty() && rep.scenes >= 20,
        format!(
            "{} scenes, {} derivatives, worst error {:.3} of tolerance, {} mismatches{}",
            rep.scenes,
            rep.checks,
            rep.worst_ratio,
            rep.failures.len(),
            rep.failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

/// `1 - Π(1 - g_i)` for one pixel, from single-Gaussian projections.
fn composited_coverage(map: &GaussianMap, pose: &SE3Pose, k: &CameraIntrinsics, x: usize, y: usize) -> f64 {
    let (u, v) = CameraIntrinsics::pixel_center(x, y);
    let px = nalgebra::Vector2::new(u, v);
    let mut hits: Vec<(f64, u64, f64)> = map
        .gaussians
        .iter()
        .filter(|g| g.alive)
        .filter_map(|g| project(g, pose, k).map(|p| (g, p)))
        .filter(|(_, p)| {
            (u - p.mean2d.x).abs() <= 3.0 * p.cov2d[(0, 0)].sqrt()
                && (v - p.mean2d.y).abs() <= 3.0 * p.cov2d[(1, 1)].sqrt()
        })
        .map(|(g, p)| (p.depth, g.id, pixel_weight(&p, g.opacity, &px)))
        .collect();
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut t = 1.0;
    for (_, _, g) in hits {
        t *= 1.0 - g;
        if t < 1e-4 {
            break;
        }
    }
    1.0 - t
}

pub fn criterion_compositing() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    let mut order_ok = true;
    for _ in 0..100 {
        let (map, pose, k) = random_scene(&mut r, 20);
        let out = render(&map, &pose, &k);
        for (x, y, &w) in out.weight_sum.enumerate() {
            worst = worst.max((w - composited_coverage(&map, &pose, &k, x, y)).abs());
        }
        let mut shuffled = map.clone();
        shuffled.gaussians.shuffle(&mut r);
        let again = render(&shuffled, &pose, &k);
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits());
        let flat = |c: &Grid<[f64; 3]>| c.data().iter().flatten().copied().collect::<Vec<f64>>();
        order_ok &= same(&flat(&out.color), &flat(&again.color))
            && same(out.depth.data(), again.depth.data())
            && same(out.weight_sum.data(), again.weight_sum.data());
    }
    Outcome::new(
        worst <= 1e-9 && order_ok,
        format!("max |Σw - (1 - Π(1-g))| = {worst:.2e}, insertion order invariant: {order_ok}"),
    )
}

fn direct_posterior(f: bool, d: bool, p: &PosteriorParams) -> f64 {
    let lf1 = if f { p.tpr_f } else { 1.0 - p.tpr_f };
    let lf0 = if f { p.fpr_f } else { 1.0 - p.fpr_f };
    let ld1 = if d { p.tpr_d } else { 1.0 - p.tpr_d };
    let ld0 = if d { p.fpr_d } else { 1.0 - p.fpr_d };
    let a = p.prior * lf1 * ld1;
    let b = (1.0 - p.prior) * lf0 * ld0;
    a / (a + b)
}

fn random_params(r: &mut ChaCha8Rng) -> PosteriorParams {
    PosteriorParams {
        prior: r.random_range(0.01..0.99),
        tpr_f: r.random_range(0.01..0.99),
        fpr_f: r.random_range(0.01..0.99),
        tpr_d: r.random_range(0.01..0.99),
        fpr_d: r.random_range(0.01..0.99),
        threshold: 0.95,
    }
}

fn blob_mask(r: &mut ChaCha8Rng, w: usize, h: usize, noise: f64) -> MaskImage {
    let cx = r.random_range(0.0..w as f64);
    let cy = r.random_range(0.0..h as f64);
    let rad = r.random_range(3.0..10.0);
    Grid::from_fn(w, h, |x, y| {
        let inside = (x as f64 - cx).hypot(y as f64 - cy) < rad;
        inside != r.random_bool(noise)
    })
}

pub fn criterion_bayes() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = random_params(&mut r);
        for (f, d) in [(false, false), (false, true), (true, false), (true, true)] {
            worst = worst.max((posterior(f, d, &p) - direct_posterior(f, d, &p)).abs());
        }
    }
    let mut monotone = 0;
    for _ in 0..50 {
        let f = blob_mask(&mut r, 32, 32, 0.05);
        let d = blob_mask(&mut r, 32, 32, 0.05);
        let strict_p = PosteriorParams { threshold: 0.99, ..PosteriorParams::default() };
        let (strict, _) = fuse(&f, &d, &strict_p, DEFAULT_K_MAX).unwrap();
        let p = PosteriorParams { threshold: 0.9, ..strict_p };
        let (loose, _) = fuse(&f, &d, &p, DEFAULT_K_MAX).unwrap();
        if strict.data().iter().zip(loose.data()).all(|(&s, &l)| !s || l) {
            monotone += 1;
        }
    }
    Outcome::new(
        worst <= 1e-12 && monotone == 50,
        format!("max posterior error {worst:.2e} over 1000 draws, M(0.99) ⊆ M(0.9) on {monotone}/50 pairs"),
    )
}

pub struct FusionQuality {
    pub fused_iou: Vec<f64>,
    pub flow_iou: Vec<f64>,
}

pub fn fusion_quality(flip: f64) -> FusionQuality {
    let mut cfg = SimConfig::default();
    cfg.noise.mask_flip_fp = flip;
    cfg.noise.mask_flip_fn = flip;
    let b = simulate(&cfg).unwrap();
    let p = PosteriorParams::default();
    let mut q = FusionQuality {
        fused_iou: Vec::new(),
        flow_iou: Vec::new(),
    };
    for i in 0..b.len() {
        let (m, _) = fuse(&b.est_flow_mask[i], &b.est_depth_mask[i], &p, DEFAULT_K_MAX).unwrap();
        q.fused_iou.push(mask_scores(&m, &b.gt_dyn_mask[i]).0);
        q.flow_iou.push(mask_scores(&b.est_flow_mask[i], &b.gt_dyn_mask[i]).0);
    }
    q
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn criterion_fusion_quality() -> Outcome {
    let q = fusion_quality(0.1);
    let never_worse = q.fused_iou.iter().zip(&q.flow_iou).filter(|(a, b)| a >= b).count();
    let m = mean(&q.fused_iou);
    Outcome::new(
        never_worse == q.fused_iou.len() && m >= 0.85,
        format!(
            "fused ≥ flow-only on {never_worse}/{} frames, mean IoU fused {m:.3} (need ≥ 0.85), flow-only {:.3}",
            q.fused_iou.len(),
            mean(&q.flow_iou)
        ),
    )
}

pub fn run_sim(cfg: &Config) -> (Dataset, PipelineOutput, EvalReport) {
    let bundle = simulate(&cfg.sim_config().unwrap()).unwrap();
    let ds = Dataset::from_bundle(&bundle).unwrap();
    let out = run_pipeline(&ds, &PipelineConfig::from_config(cfg).unwrap(), None, |_, _, _| Ok(())).unwrap();
    let report = evaluate_run(&ds, &out, cfg).unwrap();
    (ds, out, report)
}

pub fn criterion_tracking_ablation() -> Outcome {
    let mut passed = 0;
    let mut lines = Vec::new();
    let mut coverage = Vec::new();
    for seed in 1..=5u64 {
        let on = Config { seed, ..Config::default() };
        let mut off = on.clone();
        off.mask_fusion = false;
        let (ds, _, r_on) = run_sim(&on);
        let (_, _, r_off) = run_sim(&off);
        let gt = ds.gt_masks.as_ref().unwrap();
        coverage.push(mean(
            &gt.iter().map(|m| m.data().iter().filter(|&&b| b).count() as f64 / m.len() as f64).collect::<Vec<_>>(),
        ));
        let (a_on, a_off, extent) = (r_on.ate_rmse.unwrap(), r_off.ate_rmse.unwrap(), r_on.trajectory_extent.unwrap());
        let ok = a_on <= 0.5 * a_off && a_on <= 0.01 * extent;
        passed += usize::from(ok);
        lines.push(format!("seed {seed}: on {a_on:.4} off {a_off:.4} ({:.2}% of extent)", 100.0 * a_on / extent));
    }
    let cov_ok = coverage.iter().all(|c| (0.10..=0.20).contains(c));
    Outcome::new(
        passed >= 3 && cov_ok,
        format!(
            "{passed}/5 seeds pass, object coverage {:.3}..{:.3}; {}",
            coverage.iter().copied().fold(f64::INFINITY, f64::min),
            coverage.iter().copied().fold(0.0, f64::max),
            lines.join("; ")
        ),
    )
}

pub fn criterion_motion_loss() -> Outcome {
    let mut r = rng(6);
    let mask = static_mask(&Grid::new(8, 8, false), &Grid::new(8, 8, 2.0)).unwrap();
    let mut zero = true;
    let mut worst_inv = 0.0f64;
    let mut exact = true;
    for _ in 0..100 {
        let p = SE3Pose::exp(&random_twist(&mut r, 0.5));
        let q = SE3Pose::exp(&random_twist(&mut r, 0.5));
        let s = ScaleFactor::new(r.random_range(0.5..2.0)).unwrap();
        zero &= motion_loss(&p, &p, s, &mask, 1e-6) == 0.0;
        let base = motion_loss_terms(&p, &q, s, &mask, 1e-6).translation;
        for alpha in [0.1, 2.0, 10.0] {
            let scaled = SE3Pose::new(p.rotation, p.translation * alpha);
            let t = motion_loss_terms(&scaled, &q, s, &mask, 1e-6).translation;
            worst_inv = worst_inv.max((t - base).abs());
        }
        let terms = TrackingLossTerms {
            l_o: r.random_range(0.0..3.0),
            l_u: r.random_range(0.0..3.0),
            l_m: motion_loss(&p, &q, s, &mask, 1e-6),
            lambda1: r.random_range(0.0..2.0),
            lambda2: r.random_range(0.0..2.0),
            epsilon: 1e-6,
        };
        exact &= tracking_loss(&terms) == terms.lambda1 * terms.l_o + terms.lambda2 * terms.l_u + terms.l_m;
    }
    Outcome::new(
        zero && worst_inv <= 1e-12 && exact,
        format!("L_M(P,P) = 0: {zero}, worst scale-invariance error {worst_inv:.2e}, L_P arithmetic exact: {exact}"),
    )
}

pub struct MappingAblation {
    pub masked_psnr: f64,
    pub unmasked_psnr: f64,
}

/// Builds the map from the default scene's keyframes at true poses, once with
/// fused masks, pruning and masked losses and once with none of them, and
/// scores both on ground-truth static pixels.
pub fn mapping_ablation() -> MappingAblation {
    let b = simulate(&SimConfig::default()).unwrap();
    let k = b.intrinsics;
    let keyframes: Vec<usize> = (0..b.len()).filter(|&i| keyframe_policy(i)).collect();
    let run = |masked: bool| {
        let cfg = if masked {
            MapperConfig::default()
        } else {
            MapperConfig {
                prune_enabled: false,
                weights: MaskedLossWeights::unmasked(),
                ..MapperConfig::default()
            }
        };
        let mut mapper = Mapper::new(k, cfg).unwrap();
        for &i in &keyframes {
            let mask = if masked {
                fuse(&b.est_flow_mask[i], &b.est_depth_mask[i], &PosteriorParams::default(), DEFAULT_K_MAX)
                    .unwrap()
                    .0
            } else {
                Grid::new(k.width, k.height, false)
            };
            let mut frame = b.frames[i].clone();
            frame.est_depth = Some(b.est_depth[i].clone());
            let s = 1.0 / b.depth_scales[i];
            mapper
                .integrate(KeyframePacket {
                    frame,
                    pose: b.gt_poses[i],
                    fused_mask: mask,
                    scaled_depth: b.est_depth[i].map(|d| d * s),
                })
                .unwrap();
        }
        let scores: Vec<f64> = keyframes
            .iter()
            .map(|&i| {
                let img = render(mapper.map(), &b.gt_poses[i], &k).color;
                psnr(&img, &b.frames[i].color, &b.gt_dyn_mask[i].map(|&d| !d)).unwrap()
            })
            .collect();
        mean(&scores)
    };
    MappingAblation {
        masked_psnr: run(true),
        unmasked_psnr: run(false),
    }
}

pub fn criterion_mapping_ablation() -> Outcome {
    let a = mapping_ablation();
    let gain = a.masked_psnr - a.unmasked_psnr;
    Outcome::new(
        gain >= 2.0,
        format!("static PSNR masked {:.2} dB, unmasked {:.2} dB, gain {gain:.2} dB", a.masked_psnr, a.unmasked_psnr),
    )
}

pub fn criterion_keyframe_ba() -> Outcome {
    let policy = (0..10_000).all(|i| keyframe_policy(i) == (i % 10 == 0));

    let b = simulate(&SimConfig {
        n_frames: 41,
        ..SimConfig::default()
    })
    .unwrap();
    let k = b.intrinsics;
    let mut mapper = Mapper::new(k, MapperConfig::default()).unwrap();
    let members = [0usize, 10, 20, 30, 40];
    for &i in &members {
        let mut frame = b.frames[i].clone();
        frame.est_depth = Some(b.gt_depth[i].clone());
        mapper
            .integrate(KeyframePacket {
                frame,
                pose: b.gt_poses[i],
                fused_mask: b.gt_dyn_mask[i].clone(),
                scaled_depth: b.gt_depth[i].clone(),
            })
            .unwrap();
    }
    let mut r = rng(8);
    let mut group = KeyframeGroup::default();
    for &i in &members[..3] {
        group.push(i, b.gt_poses[i], b.frames[i].color.clone(), b.gt_dyn_mask[i].map(|&d| !d));
    }
    let refuses = matches!(local_bundle_adjust(&group, mapper.map(), &k), Err(Error::Precondition(_)));
    let mut monotone = 0;
    let trials = 6;
    for t in 0..trials {
        let mut g = KeyframeGroup::default();
        for &i in &members[t % 2..t % 2 + 4] {
            let pose = SE3Pose::exp(&random_twist(&mut r, 0.01)).compose(&b.gt_poses[i]);
            g.push(i, pose, b.frames[i].color.clone(), b.gt_dyn_mask[i].map(|&d| !d));
        }
        let res = local_bundle_adjust(&g, mapper.map(), &k).unwrap();
        let traces_ok = res.traces.iter().all(|tr| tr.windows(2).all(|w| w[1] <= w[0]));
        if res.cost_after <= res.cost_before && traces_ok {
            monotone += 1;
        }
    }
    let cfg = Config { n_frames: 41, ..Config::default() };
    let (_, out, _) = run_sim(&cfg);
    Outcome::new(
        policy && refuses && monotone == trials && out.ba_monotone && out.ba_runs > 0,
        format!(
            "policy over 10^4 indices: {policy}, refuses 3 keyframes: {refuses}, non-increasing on {monotone}/{trials} \
             direct runs and {} pipeline runs (all: {})",
            out.ba_runs, out.ba_monotone
        ),
    )
}

pub fn dynsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynsplat"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Simulate, run and evaluate through the command line in `dir`.
pub fn cli_smoke(dir: &Path, extra_run_args: &[&str]) -> Result<EvalReport, String> {
    let data = dir.join("data");
    let out = dir.join("out");
    let (data_s, out_s) = (data.to_str().unwrap(), out.to_str().unwrap());
    let sim = dynsplat(&["simulate", "--out", data_s, "--n_frames=25"]);
    if !sim.status.success() {
        return Err(format!("simulate: {}", String::from_utf8_lossy(&sim.stderr)));
    }
    let mut run_args = vec!["run", "--data", data_s, "--out", out_s];
    run_args.extend_from_slice(extra_run_args);
    let run = dynsplat(&run_args);
    if !run.status.success() {
        return Err(format!("run: {}", String::from_utf8_lossy(&run.stderr)));
    }
    let est = out.join("trajectory_final.txt");
    let gt = data.join("groundtruth.txt");
    let eval = dynsplat(&["eval", "--est", est.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    if !eval.status.success() {
        return Err(format!("eval: {}", String::from_utf8_lossy(&eval.stderr)));
    }
    let text = std::fs::read_to_string(out.join("eval_report.json")).map_err(|e| e.to_string())?;
    EvalReport::from_json(&text).map_err(|e| e.to_string())
}

pub fn report_is_complete(r: &EvalReport) -> bool {
    r.ate_rmse.is_some()
        && r.ate_rmse_keyframes.is_some()
        && r.trajectory_extent.is_some()
        && r.psnr_static.is_some()
        && r.mask_iou.is_some()
        && r.mask_precision.is_some()
        && r.mask_recall.is_some()
        && r.frames > 0
        && r.keyframes > 0
        && r.gaussians > 0
}

pub fn criterion_formats() -> Outcome {
    let mut r = rng(9);
    let mut t = Trajectory::new();
    for i in 0..200 {
        let pose = SE3Pose::exp(&random_twist(&mut r, 3.0));
        t.push(TrajectoryEntry::from_camera_to_world(i as f64 * 0.033, &pose)).unwrap();
    }
    let text = trajectory_to_string(&t);
    let tum = trajectory_to_string(&parse_trajectory(&text).unwrap()) == text;

    let flow = Grid::from_fn(13, 7, |_, _| {
        [r.random_range(-50.0f32..50.0) as f64, r.random_range(-50.0f32..50.0) as f64]
    });
    let bytes = encode_flo(&flow);
    let back = decode_flo(&bytes).unwrap();
    let flo = back.data().iter().zip(flow.data()).all(|(a, b)| a[0].to_bits() == b[0].to_bits() && a[1].to_bits() == b[1].to_bits())
        && encode_flo(&back) == bytes;

    let dir = tempfile::tempdir().unwrap();
    let quantized = Grid::from_fn(17, 9, |_, _| r.random_range(1u32..65535) as f64 / DEPTH_SCALE);
    let path = dir.path().join("d.png");
    write_depth_png(&path, &quantized).unwrap();
    let depth_exact = read_depth_png(&path).unwrap() == quantized;
    let arbitrary = Grid::from_fn(17, 9, |_, _| r.random_range(0.1..13.0));
    write_depth_png(&path, &arbitrary).unwrap();
    let depth_close = read_depth_png(&path)
        .unwrap()
        .data()
        .iter()
        .zip(arbitrary.data())
        .all(|(a, b)| (a - b).abs() <= 0.5 / DEPTH_SCALE + 1e-12);

    let smoke = cli_smoke(dir.path(), &[]);
    let smoke_ok = smoke.as_ref().is_ok_and(report_is_complete);
    Outcome::new(
        tum && flo && depth_exact && depth_close && smoke_ok,
        format!(
            "TUM byte-stable: {tum}, .flo bit-exact: {flo}, depth PNG exact: {depth_exact}, within 1/10000 m: {depth_close}, \
             CLI smoke: {}",
            match &smoke {
                Ok(r) if report_is_complete(r) => "complete report".to_string(),
                Ok(_) => "incomplete report".to_string(),
                Err(e) => e.clone(),
            }
        ),
    )
}

pub fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t0 = Instant::now();
    let v = f();
    (v, t0.elapsed())
}
