use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::tum::Trajectory;
use crate::error::{check_shape, Error, Result};
use crate::scene_model::{ColorImage, MaskImage};

/// Largest timestamp gap for associating estimated and ground-truth poses (s).
pub const MAX_ASSOCIATION_GAP: f64 = 0.02;
pub const MIN_ATE_PAIRS: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    None,
    Rigid,
    #[default]
    Similarity,
}

impl std::str::FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "rigid" => Ok(Self::Rigid),
            "similarity" | "sim3" => Ok(Self::Similarity),
            _ => Err(Error::Config(format!("unknown alignment {s:?}"))),
        }
    }
}

/// `dst ≈ scale · rotation · src + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Closed-form least-squares alignment of `src` onto `dst` (Umeyama). With
/// `with_scale == false` the scale is fixed to 1.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<SimilarityTransform> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(Error::InvalidInput(format!(
            "alignment needs matching non-empty point sets, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if with_scale && var_s > 0.0 {
        let d = svd.singular_values;
        (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_s
    } else {
        1.0
    };
    Ok(SimilarityTransform {
        rotation,
        translation: mu_d - scale * rotation * mu_s,
        scale,
    })
}

/// Nearest-timestamp pairs `(est index, gt index)`, each ground-truth entry used
/// at most once, gaps above `max_gap` dropped.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_gap: f64) -> Vec<(usize, usize)> {
    let g: Vec<f64> = gt.entries().iter().map(|e| e.timestamp).collect();
    let mut used = vec![false; g.len()];
    let mut pairs = Vec::new();
    for (i, e) in est.entries().iter().enumerate() {
        let t = e.timestamp;
        let j = g.partition_point(|&x| x < t);
        let best = [j.checked_sub(1), Some(j)]
            .into_iter()
            .flatten()
            .filter(|&j| j < g.len() && !used[j])
            .min_by(|&a, &b| (g[a] - t).abs().total_cmp(&(g[b] - t).abs()));
        if let Some(j) = best {
            if (g[j] - t).abs() <= max_gap {
                used[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs
}

#[derive(Clone, Debug, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    pub pairs: usize,
    pub transform: SimilarityTransform,
}

/// RMSE of camera-position residuals after aligning `est` onto `gt`.
pub fn ate(est: &Trajectory, gt: &Trajectory, align: Alignment) -> Result<AteResult> {
    let pairs = associate(est, gt, MAX_ASSOCIATION_GAP);
    if pairs.len() < MIN_ATE_PAIRS {
        return Err(Error::InsufficientOverlap(pairs.len()));
    }
    let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| est.entries()[i].translation).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| gt.entries()[j].translation).collect();
    let transform = match align {
        Alignment::None => SimilarityTransform::identity(),
        Alignment::Rigid => umeyama(&src, &dst, false)?,
        Alignment::Similarity => umeyama(&src, &dst, true)?,
    };
    let sq: f64 = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (transform.apply(s) - d).norm_squared())
        .sum();
    Ok(AteResult {
        rmse: (sq / pairs.len() as f64).sqrt(),
        pairs: pairs.len(),
        transform,
    })
}

pub fn ate_rmse(est: &Trajectory, gt: &Trajectory, align: Alignment) -> Result<f64> {
    ate(est, gt, align).map(|r| r.rmse)
}

/// Peak signal-to-noise ratio over the masked pixels, peak value 1. Identical
/// images give `f64::INFINITY`.
pub fn psnr(a: &ColorImage, b: &ColorImage, region: &MaskImage) -> Result<f64> {
    check_shape(a.dims(), b.dims())?;
    check_shape(a.dims(), region.dims())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, q), &keep) in a.data().iter().zip(b.data()).zip(region.data()) {
        if keep {
            for c in 0..3 {
                sum += (p[c] - q[c]).powi(2);
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("PSNR region is empty".into()));
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub use crate::mask_fusion::mask_scores;
