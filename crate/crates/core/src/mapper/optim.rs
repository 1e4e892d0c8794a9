use nalgebra::{Quaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::loss::{depth_loss_grad, map_loss, photometric_loss_grad, MaskedLossWeights};
use super::KeyframePacket;
use crate::error::{Error, Result};
use crate::scene_model::{CameraIntrinsics, GaussianMap, Grid};
use crate::splat_renderer::{render, render_backward, GaussianGrad};

pub const SCALE_MIN: f64 = 1e-4;
pub const SCALE_MAX: f64 = 1e2;
const OPACITY_EPS: f64 = 1e-6;

/// Per-parameter-group step sizes. `position` is multiplied by the map extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub position: f64,
    pub color: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            color: 2.5e-3,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Revert any step that raises the loss and halve the step sizes.
    pub accept_only_improving: bool,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            accept_only_improving: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeReport {
    /// Total loss before each step, followed by the loss after the last one.
    pub trace: Vec<f64>,
    pub rejected_steps: usize,
    /// Whether the final loss is at most the initial loss.
    pub converged: bool,
}

/// `L_G` of one keyframe and, optionally, its upstream render gradient.
pub fn packet_loss(
    map: &GaussianMap,
    pkt: &KeyframePacket,
    k: &CameraIntrinsics,
    w: &MaskedLossWeights,
    with_grad: bool,
) -> Result<(f64, Option<Grid<[f64; 4]>>)> {
    let out = render(map, &pkt.pose, k);
    let (l_c, g_c) = photometric_loss_grad(&out.color, &pkt.frame.color, &pkt.fused_mask, w)?;
    let (l_d, g_d) = depth_loss_grad(&out.depth, &pkt.scaled_depth, &pkt.fused_mask, w)?;
    let loss = map_loss(l_c, l_d, w);
    let grad = with_grad.then(|| {
        let data = g_c
            .data()
            .iter()
            .zip(g_d.data())
            .map(|(c, &d)| [c[0], c[1], c[2], w.lambda_g * d])
            .collect();
        Grid::from_vec(k.width, k.height, data)
    });
    Ok((loss, grad))
}

/// Parameters in the coordinates the optimizer steps in.
#[derive(Clone)]
struct Params {
    position: Vector3<f64>,
    log_scale: Vector3<f64>,
    rotation: Quaternion<f64>,
    opacity_logit: f64,
    color: Vector3<f64>,
}

const N_PARAMS: usize = 14;

impl Params {
    fn flat(&self) -> [f64; N_PARAMS] {
        let mut out = [0.0; N_PARAMS];
        out[0..3].copy_from_slice(self.position.as_slice());
        out[3..6].copy_from_slice(self.log_scale.as_slice());
        out[6..10].copy_from_slice(self.rotation.coords.as_slice());
        out[10] = self.opacity_logit;
        out[11..14].copy_from_slice(self.color.as_slice());
        out
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn read_params(map: &GaussianMap) -> Vec<Params> {
    map.gaussians
        .iter()
        .map(|g| Params {
            position: g.position,
            log_scale: g.scale.map(f64::ln),
            rotation: g.rotation,
            opacity_logit: logit(g.opacity),
            color: g.color,
        })
        .collect()
}

fn write_params(map: &mut GaussianMap, params: &[Params]) {
    for (g, p) in map.gaussians.iter_mut().zip(params) {
        g.position = p.position;
        g.scale = p.log_scale.map(|v| v.exp().clamp(SCALE_MIN, SCALE_MAX));
        let n = p.rotation.norm();
        g.rotation = if n > 0.0 && n.is_finite() { p.rotation / n } else { Quaternion::identity() };
        g.opacity = sigmoid(p.opacity_logit);
        g.color = p.color.map(|c| c.clamp(0.0, 1.0));
    }
}

/// Reparameterized gradient: scales in log space, opacity as a logit.
fn flat_grad(g: &GaussianGrad, gauss: &crate::scene_model::Gaussian) -> [f64; N_PARAMS] {
    let mut out = [0.0; N_PARAMS];
    out[0..3].copy_from_slice(g.position.as_slice());
    let s = g.scale.component_mul(&gauss.scale);
    out[3..6].copy_from_slice(s.as_slice());
    out[6..10].copy_from_slice(g.rotation.coords.as_slice());
    out[10] = g.opacity * gauss.opacity * (1.0 - gauss.opacity);
    out[11..14].copy_from_slice(g.color.as_slice());
    out
}

fn total_loss(
    map: &GaussianMap,
    packets: &[KeyframePacket],
    k: &CameraIntrinsics,
    w: &MaskedLossWeights,
    grads: Option<&mut Vec<[f64; N_PARAMS]>>,
) -> Result<f64> {
    let mut total = 0.0;
    match grads {
        None => {
            for pkt in packets {
                total += packet_loss(map, pkt, k, w, false)?.0;
            }
        }
        Some(acc) => {
            acc.clear();
            acc.resize(map.len(), [0.0; N_PARAMS]);
            for pkt in packets {
                let (l, lg) = packet_loss(map, pkt, k, w, true)?;
                total += l;
                let rg = render_backward(map, &pkt.pose, k, &lg.expect("requested"));
                for ((a, g), gauss) in acc.iter_mut().zip(&rg.gaussians).zip(&map.gaussians) {
                    if !gauss.alive {
                        continue;
                    }
                    let f = flat_grad(g, gauss);
                    for (x, y) in a.iter_mut().zip(f) {
                        *x += y;
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Adaptive-moment descent on `Σ L_G` over the given keyframes.
///
/// Scales are stepped in log space and opacities as logits; after each step
/// scales are clamped to `[1e-4, 1e2]`, colors to `[0, 1]` and quaternions
/// renormalized.
pub fn optimize_map(
    map: &mut GaussianMap,
    packets: &[KeyframePacket],
    k: &CameraIntrinsics,
    iters: usize,
    w: &MaskedLossWeights,
    cfg: &OptimizeConfig,
) -> Result<OptimizeReport> {
    if packets.is_empty() {
        return Err(Error::Precondition("optimize_map needs at least one keyframe".into()));
    }
    let extent = map.extent();
    let group_lr = |i: usize| match i {
        0..=2 => cfg.lr.position * extent,
        3..=5 => cfg.lr.scale,
        6..=9 => cfg.lr.rotation,
        10 => cfg.lr.opacity,
        _ => cfg.lr.color,
    };
    let lr: Vec<f64> = (0..N_PARAMS).map(group_lr).collect();
    let mut lr_mult = 1.0;

    let mut params = read_params(map);
    let mut m = vec![[0.0; N_PARAMS]; params.len()];
    let mut v = vec![[0.0; N_PARAMS]; params.len()];
    let mut grads = Vec::new();
    let mut trace = Vec::with_capacity(iters + 1);
    let mut rejected = 0;
    let mut best: Option<(f64, Vec<Params>)> = None;
    let mut t = 0;

    for it in 0..=iters {
        let want_grad = it < iters;
        let loss = total_loss(map, packets, k, w, want_grad.then_some(&mut grads))?;
        if cfg.accept_only_improving {
            match &best {
                Some((bl, bp)) if loss > *bl => {
                    rejected += 1;
                    params = bp.clone();
                    write_params(map, &params);
                    lr_mult *= 0.5;
                    m.iter_mut().for_each(|x| *x = [0.0; N_PARAMS]);
                    v.iter_mut().for_each(|x| *x = [0.0; N_PARAMS]);
                    t = 0;
                    trace.push(*bl);
                    if want_grad {
                        total_loss(map, packets, k, w, Some(&mut grads))?;
                    } else {
                        break;
                    }
                }
                _ => {
                    best = Some((loss, params.clone()));
                    trace.push(loss);
                }
            }
        } else {
            trace.push(loss);
        }
        if !want_grad {
            break;
        }
        t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if !map.gaussians[i].alive {
                continue;
            }
            let mut flat = p.flat();
            for j in 0..N_PARAMS {
                let g = grads[i][j];
                m[i][j] = cfg.beta1 * m[i][j] + (1.0 - cfg.beta1) * g;
                v[i][j] = cfg.beta2 * v[i][j] + (1.0 - cfg.beta2) * g * g;
                let mh = m[i][j] / bc1;
                let vh = v[i][j] / bc2;
                if mh != 0.0 {
                    flat[j] -= lr_mult * lr[j] * mh / (vh.sqrt() + cfg.eps);
                }
            }
            p.position = Vector3::new(flat[0], flat[1], flat[2]);
            p.log_scale = Vector3::new(flat[3], flat[4], flat[5])
                .map(|s| s.clamp(SCALE_MIN.ln(), SCALE_MAX.ln()));
            let q = Quaternion::new(flat[6], flat[7], flat[8], flat[9]);
            let n = q.norm();
            p.rotation = if n > 0.0 { q / n } else { Quaternion::identity() };
            p.opacity_logit = flat[10];
            p.color = Vector3::new(flat[11], flat[12], flat[13]).map(|c| c.clamp(0.0, 1.0));
        }
        write_params(map, &params);
    }
    if let (true, Some((bl, bp))) = (cfg.accept_only_improving, &best) {
        if trace.last().is_some_and(|l| l > bl) {
            write_params(map, bp);
        }
    }
    let converged = trace.last().copied().unwrap_or(0.0) <= trace[0];
    Ok(OptimizeReport {
        trace,
        rejected_steps: rejected,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_model::{Frame, Gaussian, SE3Pose};

    fn one_gaussian() -> (GaussianMap, CameraIntrinsics) {
        let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap();
        let mut map = GaussianMap::new();
        map.insert(Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.4, 0.8, Vector3::new(0.2, 0.5, 0.7)));
        (map, k)
    }

    fn packet_from(map: &GaussianMap, k: &CameraIntrinsics) -> KeyframePacket {
        let out = render(map, &SE3Pose::identity(), k);
        let mut frame = Frame::new(0, 0.0, out.color.clone());
        frame.est_depth = Some(out.depth.clone());
        KeyframePacket {
            frame,
            pose: SE3Pose::identity(),
            fused_mask: Grid::new(16, 16, false),
            scaled_depth: out.depth,
        }
    }

    #[test]
    fn exact_map_is_a_fixed_point() {
        let (mut map, k) = one_gaussian();
        let pkt = packet_from(&map, &k);
        let before = map.clone();
        let r = optimize_map(&mut map, &[pkt], &k, 10, &MaskedLossWeights::default(), &OptimizeConfig::default()).unwrap();
        assert!(r.trace.iter().all(|&l| l == 0.0));
        assert_eq!(map.gaussians[0].color, before.gaussians[0].color);
    }

    #[test]
    fn color_converges() {
        let (map, k) = one_gaussian();
        let pkt = packet_from(&map, &k);
        let mut wrong = map.clone();
        wrong.gaussians[0].color = Vector3::new(0.4, 0.3, 0.6);
        let cfg = OptimizeConfig {
            lr: LearningRates { position: 0.0, opacity: 0.0, scale: 0.0, rotation: 0.0, ..Default::default() },
            ..Default::default()
        };
        let r = optimize_map(&mut wrong, &[pkt], &k, 200, &MaskedLossWeights::default(), &cfg).unwrap();
        assert!(r.converged);
        let err = (wrong.gaussians[0].color - map.gaussians[0].color).abs().max();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn accept_only_improving_is_monotone() {
        let (map, k) = one_gaussian();
        let pkt = packet_from(&map, &k);
        let mut wrong = map.clone();
        wrong.gaussians[0].position.x += 0.1;
        wrong.gaussians[0].opacity = 0.4;
        wrong.gaussians[0].scale *= 1.3;
        let cfg = OptimizeConfig { accept_only_improving: true, ..Default::default() };
        let r = optimize_map(&mut wrong, &[pkt], &k, 60, &MaskedLossWeights::default(), &cfg).unwrap();
        for w in r.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(r.trace.last().unwrap() < &r.trace[0]);
    }

    #[test]
    fn empty_packet_list_is_rejected() {
        let (mut map, k) = one_gaussian();
        let r = optimize_map(&mut map, &[], &k, 1, &MaskedLossWeights::default(), &OptimizeConfig::default());
        assert!(matches!(r, Err(Error::Precondition(_))));
    }
}
