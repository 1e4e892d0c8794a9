use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::scene_model::{depth_is_valid, ColorImage, DepthImage, FusedMask, Grid};

/// Penalty factors of the masked losses. Dynamic-pixel factors default to 0 so
/// moving objects never supervise the map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedLossWeights {
    /// Photometric, dynamic pixels.
    pub lambda_d: f64,
    /// Photometric, static pixels.
    pub lambda_s: f64,
    /// Depth, dynamic pixels.
    pub lambda_t: f64,
    /// Depth, static pixels.
    pub lambda_m: f64,
    /// Depth-vs-color balance.
    pub lambda_g: f64,
}

impl Default for MaskedLossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 0.0,
            lambda_s: 1.0,
            lambda_t: 0.0,
            lambda_m: 1.0,
            lambda_g: 1.0,
        }
    }
}

impl MaskedLossWeights {
    /// Every pixel weighted equally, as if no mask existed.
    pub fn unmasked() -> Self {
        Self {
            lambda_d: 1.0,
            lambda_s: 1.0,
            lambda_t: 1.0,
            lambda_m: 1.0,
            lambda_g: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_d, self.lambda_s, self.lambda_t, self.lambda_m, self.lambda_g];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

/// `λ_dyn·(N_d/N)·mean_dyn + λ_st·((N−N_d)/N)·mean_static` over the counted
/// pixels, with empty partitions contributing 0. Returns the loss and, per pixel,
/// the factor multiplying that pixel's residual (0 for uncounted pixels).
fn partitioned<'a>(
    residuals: impl Iterator<Item = Option<f64>>,
    mask: impl Iterator<Item = &'a bool>,
    lambda_dyn: f64,
    lambda_static: f64,
    len: usize,
) -> (f64, Vec<f64>) {
    let mut sum_d = 0.0;
    let mut sum_s = 0.0;
    let mut n_d = 0usize;
    let mut n_s = 0usize;
    let mut kinds = Vec::with_capacity(len);
    for (r, &dynamic) in residuals.zip(mask) {
        match r {
            Some(r) if dynamic => {
                sum_d += r;
                n_d += 1;
                kinds.push(1u8);
            }
            Some(r) => {
                sum_s += r;
                n_s += 1;
                kinds.push(2u8);
            }
            None => kinds.push(0u8),
        }
    }
    let n = n_d + n_s;
    if n == 0 {
        return (0.0, vec![0.0; kinds.len()]);
    }
    let nf = n as f64;
    let mut loss = 0.0;
    if n_d > 0 {
        loss += lambda_dyn * (n_d as f64 / nf) * (sum_d / n_d as f64);
    }
    if n_s > 0 {
        loss += lambda_static * (n_s as f64 / nf) * (sum_s / n_s as f64);
    }
    let factors = kinds
        .into_iter()
        .map(|k| match k {
            1 => lambda_dyn / nf,
            2 => lambda_static / nf,
            _ => 0.0,
        })
        .collect();
    (loss, factors)
}

#[inline]
fn color_l1(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0
}

/// Masked L1 color loss; a pixel's L1 is the mean absolute channel difference.
pub fn photometric_loss(
    c_render: &ColorImage,
    c_gt: &ColorImage,
    mask: &FusedMask,
    w: &MaskedLossWeights,
) -> Result<f64> {
    Ok(photometric_loss_grad(c_render, c_gt, mask, w)?.0)
}

/// Loss and its gradient with respect to the rendered colors.
pub fn photometric_loss_grad(
    c_render: &ColorImage,
    c_gt: &ColorImage,
    mask: &FusedMask,
    w: &MaskedLossWeights,
) -> Result<(f64, Grid<[f64; 3]>)> {
    check_shape(c_render.dims(), c_gt.dims())?;
    check_shape(c_render.dims(), mask.dims())?;
    let residuals = c_render
        .data()
        .iter()
        .zip(c_gt.data())
        .map(|(a, b)| Some(color_l1(a, b)));
    let (loss, factors) = partitioned(residuals, mask.data().iter(), w.lambda_d, w.lambda_s, c_render.len());
    let grad = c_render
        .data()
        .iter()
        .zip(c_gt.data())
        .zip(factors)
        .map(|((a, b), f)| {
            let s = |i: usize| f / 3.0 * sign(a[i] - b[i]);
            [s(0), s(1), s(2)]
        })
        .collect();
    Ok((loss, Grid::from_vec(c_render.width(), c_render.height(), grad)))
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Masked L1 depth loss over pixels with valid estimated depth.
pub fn depth_loss(
    d_render: &DepthImage,
    d_est: &DepthImage,
    mask: &FusedMask,
    w: &MaskedLossWeights,
) -> Result<f64> {
    Ok(depth_loss_grad(d_render, d_est, mask, w)?.0)
}

pub fn depth_loss_grad(
    d_render: &DepthImage,
    d_est: &DepthImage,
    mask: &FusedMask,
    w: &MaskedLossWeights,
) -> Result<(f64, Grid<f64>)> {
    check_shape(d_render.dims(), d_est.dims())?;
    check_shape(d_render.dims(), mask.dims())?;
    let residuals = d_render
        .data()
        .iter()
        .zip(d_est.data())
        .map(|(&r, &e)| depth_is_valid(e).then(|| (r - e).abs()));
    let (loss, factors) = partitioned(residuals, mask.data().iter(), w.lambda_t, w.lambda_m, d_render.len());
    let grad = d_render
        .data()
        .iter()
        .zip(d_est.data())
        .zip(factors)
        .map(|((&r, &e), f)| f * sign(r - e))
        .collect();
    Ok((loss, Grid::from_vec(d_render.width(), d_render.height(), grad)))
}

/// `L_G = L_c + λ L_d`.
pub fn map_loss(l_c: f64, l_d: f64, w: &MaskedLossWeights) -> f64 {
    l_c + w.lambda_g * l_d
}
