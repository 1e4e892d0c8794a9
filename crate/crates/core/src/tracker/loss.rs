use crate::error::{check_shape, Error, Result};
use crate::scene_model::{depth_is_valid, DepthImage, FlowField, FusedMask, Grid, MaskImage, SE3Pose};

/// Minimum number of static pixels with valid depth for a scale estimate.
pub const MIN_SCALE_PIXELS: usize = 100;

/// Static pixels with usable estimated depth.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticDepthMask {
    pub bits: MaskImage,
    /// Fraction of all pixels that are static with valid depth.
    pub static_fraction: f64,
}

impl StaticDepthMask {
    pub fn count(&self) -> usize {
        self.bits.data().iter().filter(|&&b| b).count()
    }

    /// Every pixel static.
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            bits: Grid::new(width, height, true),
            static_fraction: 1.0,
        }
    }
}

/// Ratio between map units and monocular depth units.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct ScaleFactor(f64);

impl ScaleFactor {
    pub fn new(s: f64) -> Result<Self> {
        if s.is_finite() && s > 0.0 {
            Ok(Self(s))
        } else {
            Err(Error::InvalidInput(format!("scale factor {s} must be finite and positive")))
        }
    }

    pub fn one() -> Self {
        Self(1.0)
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn static_mask(fused: &FusedMask, est_depth: &DepthImage) -> Result<StaticDepthMask> {
    check_shape(fused.dims(), est_depth.dims())?;
    let bits: Vec<bool> = fused
        .data()
        .iter()
        .zip(est_depth.data())
        .map(|(&dynamic, &d)| !dynamic && depth_is_valid(d))
        .collect();
    let n = bits.iter().filter(|&&b| b).count();
    let total = bits.len().max(1);
    Ok(StaticDepthMask {
        bits: Grid::from_vec(fused.width(), fused.height(), bits),
        static_fraction: n as f64 / total as f64,
    })
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    values.sort_by(f64::total_cmp);
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median of `ref_depth / est_depth` over static pixels where both are valid.
pub fn estimate_scale(
    est_depth: &DepthImage,
    ref_depth: &DepthImage,
    m_ds: &StaticDepthMask,
) -> Result<ScaleFactor> {
    check_shape(est_depth.dims(), ref_depth.dims())?;
    check_shape(est_depth.dims(), m_ds.bits.dims())?;
    let mut ratios: Vec<f64> = est_depth
        .data()
        .iter()
        .zip(ref_depth.data())
        .zip(m_ds.bits.data())
        .filter(|((&e, &r), &s)| s && depth_is_valid(e) && depth_is_valid(r))
        .map(|((&e, &r), _)| r / e)
        .collect();
    if ratios.len() < MIN_SCALE_PIXELS {
        return Err(Error::ScaleUnobservable {
            valid: ratios.len(),
            required: MIN_SCALE_PIXELS,
        });
    }
    ScaleFactor::new(median(&mut ratios))
}

/// `F̃ = F · M_ds · S_n`.
pub fn scaled_flow(f: &FlowField, m_ds: &StaticDepthMask, s: ScaleFactor) -> Result<FlowField> {
    check_shape(f.dims(), m_ds.bits.dims())?;
    let s = s.value();
    let data = f
        .data()
        .iter()
        .zip(m_ds.bits.data())
        .map(|(v, &keep)| if keep { [v[0] * s, v[1] * s] } else { [0.0, 0.0] })
        .collect();
    Ok(Grid::from_vec(f.width(), f.height(), data))
}

/// The two parts of the camera-motion loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionLoss {
    pub translation: f64,
    pub rotation: f64,
}

impl MotionLoss {
    pub fn total(&self) -> f64 {
        self.translation + self.rotation
    }
}

/// Scale-normalized translation difference plus the static-fraction weighted
/// Frobenius rotation difference.
pub fn motion_loss_terms(
    est: &SE3Pose,
    reference: &SE3Pose,
    s: ScaleFactor,
    m_ds: &StaticDepthMask,
    epsilon: f64,
) -> MotionLoss {
    let s = s.value();
    let te = est.translation;
    let tr = reference.translation;
    let a = te / (te.norm() * s).max(epsilon);
    let b = tr / (tr.norm() * s).max(epsilon);
    MotionLoss {
        translation: (a - b).norm(),
        rotation: m_ds.static_fraction * (est.rotation - reference.rotation).norm(),
    }
}

pub fn motion_loss(
    est: &SE3Pose,
    reference: &SE3Pose,
    s: ScaleFactor,
    m_ds: &StaticDepthMask,
    epsilon: f64,
) -> f64 {
    motion_loss_terms(est, reference, s, m_ds, epsilon).total()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingLossTerms {
    pub l_o: f64,
    pub l_u: f64,
    pub l_m: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
}

impl Default for TrackingLossTerms {
    fn default() -> Self {
        Self {
            l_o: 0.0,
            l_u: 0.0,
            l_m: 0.0,
            lambda1: 1.0,
            lambda2: 1.0,
            epsilon: 1e-6,
        }
    }
}

/// `λ₁ L_O + λ₂ L_U + L_M`.
pub fn tracking_loss(terms: &TrackingLossTerms) -> f64 {
    terms.lambda1 * terms.l_o + terms.lambda2 * terms.l_u + terms.l_m
}

/// Mean endpoint error over static pixels; 0 when there are none.
pub fn flow_endpoint_loss(flow: &FlowField, reference: &FlowField, m_ds: &StaticDepthMask) -> Result<f64> {
    check_shape(flow.dims(), reference.dims())?;
    check_shape(flow.dims(), m_ds.bits.dims())?;
    let (sum, n) = flow
        .data()
        .iter()
        .zip(reference.data())
        .zip(m_ds.bits.data())
        .filter(|(_, &s)| s)
        .fold((0.0, 0usize), |(acc, n), ((a, b), _)| {
            (acc + ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt(), n + 1)
        });
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Mean binary cross-entropy of predicted dynamic probabilities against a
/// reference mask. Probabilities are clamped to `[1e-6, 1 - 1e-6]`.
pub fn mask_bce(predicted: &Grid<f64>, reference: &MaskImage) -> Result<f64> {
    check_shape(predicted.dims(), reference.dims())?;
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = predicted
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&p, &r)| {
            let p = p.clamp(1e-6, 1.0 - 1e-6);
            if r {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / predicted.len() as f64)
}
