//! Dynamic-pixel masks from two independent cues and their Bayesian fusion.
//!
//! The flow cue flags pixels whose observed flow departs from the flow a static
//! scene would induce; the depth cue flags pixels whose depth is inconsistent with
//! the previous frame. Candidate pixels (either cue) are grouped into objects by
//! K-means, and inside each object a pixel is kept when the posterior
//! `P(dynamic | F_m, D_m)` under a conditionally independent Bernoulli sensor
//! model exceeds the threshold.

mod kmeans;

pub use kmeans::{cluster_dynamic, connected_components, ClusterSet, ObjectSet, MAX_LLOYD_ITERS};

use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::scene_model::{DepthImage, FlowField, FusedMask, Grid, MaskImage};

pub const DEFAULT_TAU_F: f64 = 1.0;
pub const DEFAULT_TAU_D: f64 = 0.1;
pub const DEFAULT_K_MAX: usize = 5;
const RATE_CLAMP: f64 = 1e-3;

/// Prior, per-modality confusion rates and the decision threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorParams {
    pub prior: f64,
    pub tpr_f: f64,
    pub fpr_f: f64,
    pub tpr_d: f64,
    pub fpr_d: f64,
    pub threshold: f64,
}

impl Default for PosteriorParams {
    fn default() -> Self {
        Self {
            prior: 0.3,
            tpr_f: 0.9,
            fpr_f: 0.05,
            tpr_d: 0.9,
            fpr_d: 0.05,
            threshold: 0.95,
        }
    }
}

impl PosteriorParams {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        let all = [
            ("prior", self.prior),
            ("tpr_f", self.tpr_f),
            ("fpr_f", self.fpr_f),
            ("tpr_d", self.tpr_d),
            ("fpr_d", self.fpr_d),
            ("threshold", self.threshold),
        ];
        for (name, v) in all {
            if !open(v) {
                return Err(Error::InvalidInput(format!("{name} = {v} not in (0, 1)")));
            }
        }
        Ok(())
    }

    /// Both sensors have true-positive rate above false-positive rate.
    pub fn is_informative(&self) -> bool {
        self.tpr_f > self.fpr_f && self.tpr_d > self.fpr_d
    }

    /// The same model with the two modalities exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            tpr_f: self.tpr_d,
            fpr_f: self.fpr_d,
            tpr_d: self.tpr_f,
            fpr_d: self.fpr_f,
            ..*self
        }
    }
}

/// `F_m(p) = 1` iff `‖flow(p) − rigid_flow(p)‖ > tau_f`.
pub fn flow_mask(flow: &FlowField, rigid_flow: &FlowField, tau_f: f64) -> Result<MaskImage> {
    check_shape(flow.dims(), rigid_flow.dims())?;
    let bits = flow
        .data()
        .iter()
        .zip(rigid_flow.data())
        .map(|(a, b)| {
            let du = a[0] - b[0];
            let dv = a[1] - b[1];
            (du * du + dv * dv).sqrt() > tau_f
        })
        .collect();
    Ok(Grid::from_vec(flow.width(), flow.height(), bits))
}

/// `D_m(p) = 1` iff `|d_curr − d_warped| / d_curr > tau_d`.
///
/// Non-finite values in either input mark an undefined warp and yield 0; finite
/// non-positive depths are rejected.
pub fn depth_mask(d_curr: &DepthImage, d_prev_warped: &DepthImage, tau_d: f64) -> Result<MaskImage> {
    check_shape(d_curr.dims(), d_prev_warped.dims())?;
    let mut bits = Vec::with_capacity(d_curr.len());
    for (i, (&c, &wp)) in d_curr.data().iter().zip(d_prev_warped.data()).enumerate() {
        if !(c.is_finite() && wp.is_finite()) {
            bits.push(false);
            continue;
        }
        if c <= 0.0 || wp <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "non-positive depth at pixel ({}, {})",
                i % d_curr.width(),
                i / d_curr.width()
            )));
        }
        bits.push((c - wp).abs() / c > tau_d);
    }
    Ok(Grid::from_vec(d_curr.width(), d_curr.height(), bits))
}

#[inline]
fn likelihood(observed: bool, dynamic: bool, tpr: f64, fpr: f64) -> f64 {
    match (observed, dynamic) {
        (true, true) => tpr,
        (false, true) => 1.0 - tpr,
        (true, false) => fpr,
        (false, false) => 1.0 - fpr,
    }
}

/// `P(M = 1 | F_m = f, D_m = d)` assuming the two cues are independent given `M`.
pub fn posterior(f: bool, d: bool, params: &PosteriorParams) -> f64 {
    let dyn_lik = likelihood(f, true, params.tpr_f, params.fpr_f)
        * likelihood(d, true, params.tpr_d, params.fpr_d);
    let static_lik = likelihood(f, false, params.tpr_f, params.fpr_f)
        * likelihood(d, false, params.tpr_d, params.fpr_d);
    let num = params.prior * dyn_lik;
    num / (num + (1.0 - params.prior) * static_lik)
}

/// Fused dynamic mask: union over clustered objects of the thresholded posterior.
pub fn fuse(
    f_m: &MaskImage,
    d_m: &MaskImage,
    params: &PosteriorParams,
    k_max: usize,
) -> Result<(FusedMask, ObjectSet)> {
    check_shape(f_m.dims(), d_m.dims())?;
    let (w, h) = f_m.dims();
    let candidates = Grid::from_vec(
        w,
        h,
        f_m.data()
            .iter()
            .zip(d_m.data())
            .map(|(&a, &b)| a || b)
            .collect(),
    );
    let (_, objects) = cluster_dynamic(&candidates, k_max);
    // the posterior only depends on the two bits
    let table = [
        [posterior(false, false, params), posterior(false, true, params)],
        [posterior(true, false, params), posterior(true, true, params)],
    ];
    let mut fused = Grid::new(w, h, false);
    for obj in &objects.objects {
        for &(x, y) in obj {
            let p = table[*f_m.get(x, y) as usize][*d_m.get(x, y) as usize];
            if p > params.threshold {
                fused.set(x, y, true);
            }
        }
    }
    Ok((fused, objects))
}

/// A labeled sample for [`calibrate`]: `(F_m, D_m, ground truth)`.
pub type LabeledMasks = (MaskImage, MaskImage, MaskImage);

/// Estimate prior and confusion rates by counting against ground truth. The
/// threshold is carried over from `init`.
pub fn calibrate(init: &PosteriorParams, labeled: &[LabeledMasks]) -> Result<PosteriorParams> {
    let (mut n1, mut n0) = (0usize, 0usize);
    let (mut f11, mut f10, mut d11, mut d10) = (0usize, 0usize, 0usize, 0usize);
    for (f, d, gt) in labeled {
        check_shape(gt.dims(), f.dims())?;
        check_shape(gt.dims(), d.dims())?;
        for ((&fb, &db), &g) in f.data().iter().zip(d.data()).zip(gt.data()) {
            if g {
                n1 += 1;
                f11 += fb as usize;
                d11 += db as usize;
            } else {
                n0 += 1;
                f10 += fb as usize;
                d10 += db as usize;
            }
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(Error::Calibration(format!(
            "need both classes in the labels ({n1} dynamic, {n0} static)"
        )));
    }
    let clamp = |v: f64| v.clamp(RATE_CLAMP, 1.0 - RATE_CLAMP);
    Ok(PosteriorParams {
        prior: clamp(n1 as f64 / (n0 + n1) as f64),
        tpr_f: clamp(f11 as f64 / n1 as f64),
        fpr_f: clamp(f10 as f64 / n0 as f64),
        tpr_d: clamp(d11 as f64 / n1 as f64),
        fpr_d: clamp(d10 as f64 / n0 as f64),
        threshold: init.threshold,
    })
}

/// Intersection-over-union, precision and recall of `pred` against `gt`.
/// An empty union counts as IoU 1.
pub fn mask_scores(pred: &MaskImage, gt: &MaskImage) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    (ratio(tp, tp + fp + fne), ratio(tp, tp + fp), ratio(tp, tp + fne))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(prior: f64, tpr: f64, fpr: f64) -> PosteriorParams {
        PosteriorParams {
            prior,
            tpr_f: tpr,
            fpr_f: fpr,
            tpr_d: tpr,
            fpr_d: fpr,
            threshold: 0.95,
        }
    }

    #[test]
    fn posterior_direct_arithmetic() {
        let p = params(0.5, 0.9, 0.1);
        assert!((posterior(true, true, &p) - 0.81 / 0.82).abs() < 1e-15);
        assert!((posterior(true, true, &p) - 0.98780).abs() < 1e-5);
        assert!((posterior(true, false, &p) - 0.5).abs() < 1e-15);
        assert!((posterior(false, true, &p) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uninformative_sensors_return_prior() {
        let p = params(0.37, 0.6, 0.6);
        for f in [false, true] {
            for d in [false, true] {
                assert!((posterior(f, d, &p) - 0.37).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn flow_mask_threshold() {
        let rigid = Grid::new(8, 8, [0.3, -0.2]);
        assert!(flow_mask(&rigid, &rigid, 1.0).unwrap().data().iter().all(|b| !b));
        let mut flow = rigid.clone();
        for y in 2..4 {
            for x in 3..6 {
                flow.set(x, y, [0.3 + 2.0, -0.2]);
            }
        }
        let m = flow_mask(&flow, &rigid, 1.0).unwrap();
        for (x, y, &b) in m.enumerate() {
            assert_eq!(b, (3..6).contains(&x) && (2..4).contains(&y));
        }
        assert!(flow_mask(&flow, &Grid::new(4, 4, [0.0; 2]), 1.0).is_err());
    }

    #[test]
    fn depth_mask_threshold() {
        let d = Grid::new(6, 6, 2.0);
        assert!(depth_mask(&d, &d, 0.1).unwrap().data().iter().all(|b| !b));
        let mut cur = d.clone();
        cur.set(1, 1, 2.0 * 1.3);
        let mut warped = d.clone();
        warped.set(4, 4, f64::NAN);
        cur.set(4, 4, 10.0);
        let m = depth_mask(&cur, &warped, 0.1).unwrap();
        assert!(*m.get(1, 1));
        assert!(!*m.get(4, 4));
        assert_eq!(crate::scene_model::count_set(&m), 1);
        cur.set(0, 0, 0.0);
        assert!(depth_mask(&cur, &warped, 0.1).is_err());
    }

    #[test]
    fn fuse_keeps_only_agreeing_pixels() {
        let mut f = Grid::new(10, 10, false);
        let mut d = Grid::new(10, 10, false);
        for y in 2..6 {
            for x in 2..6 {
                f.set(x, y, true);
                if x < 4 {
                    d.set(x, y, true);
                }
            }
        }
        d.set(8, 8, true);
        let p = params(0.5, 0.9, 0.1);
        let (m, objs) = fuse(&f, &d, &p, 5).unwrap();
        for (x, y, &b) in m.enumerate() {
            assert_eq!(b, *f.get(x, y) && *d.get(x, y));
        }
        assert_eq!(objs.len(), 2);
        let (z, _) = fuse(&Grid::new(10, 10, false), &Grid::new(10, 10, false), &p, 5).unwrap();
        assert!(z.data().iter().all(|b| !b));
    }

    #[test]
    fn calibrate_perfect_sensor_hits_clamps() {
        let gt = Grid::from_fn(20, 20, |x, _| x < 5);
        let c = calibrate(&PosteriorParams::default(), &[(gt.clone(), gt.clone(), gt.clone())]).unwrap();
        assert_eq!(c.tpr_f, 1.0 - 1e-3);
        assert_eq!(c.fpr_f, 1e-3);
        assert!((c.prior - 0.25).abs() < 1e-12);
        assert_eq!(c.threshold, 0.95);
    }

    #[test]
    fn calibrate_rejects_single_class() {
        let gt = Grid::new(4, 4, false);
        let r = calibrate(&PosteriorParams::default(), &[(gt.clone(), gt.clone(), gt)]);
        assert!(matches!(r, Err(Error::Calibration(_))));
    }

    #[test]
    fn mask_scores_counts() {
        let gt = Grid::from_vec(4, 1, vec![true, true, false, false]);
        let pred = Grid::from_vec(4, 1, vec![true, false, true, false]);
        let (iou, prec, rec) = mask_scores(&pred, &gt);
        assert!((iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((prec, rec), (0.5, 0.5));
    }
}
