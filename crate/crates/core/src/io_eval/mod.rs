//! File formats, evaluation metrics and run reports.

mod config;
mod dataset;
mod flo;
mod images;
mod metrics;
mod tum;

pub use config::Config;
pub use dataset::{export_bundle, load_dataset, Dataset, GROUNDTRUTH_FILE, INTRINSICS_FILE, TIMESTAMPS_FILE};
pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_MAGIC};
pub use images::{
    read_color_png, read_depth_png, read_mask_png, write_color_png, write_depth_png, write_mask_png,
    DEPTH_SCALE,
};
pub use metrics::{
    associate, ate, ate_rmse, mask_scores, psnr, umeyama, Alignment, AteResult, SimilarityTransform,
    MAX_ASSOCIATION_GAP, MIN_ATE_PAIRS,
};
pub use tum::{
    parse_trajectory, read_trajectory, trajectory_to_string, write_trajectory, Trajectory,
    TrajectoryEntry, TrajectoryWriter,
};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Result;
use crate::pipeline::PipelineOutput;
use crate::scene_model::{Grid, MaskImage};
use crate::splat_renderer::render;

/// JSON has no infinity; a perfect PSNR is written as the string `"inf"`.
mod psnr_json {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Null => Ok(None),
            serde_json::Value::String(s) if s == "inf" => Ok(Some(f64::INFINITY)),
            serde_json::Value::Number(n) => Ok(n.as_f64()),
            other => Err(serde::de::Error::custom(format!("bad PSNR value {other}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub total_s: f64,
    pub tracking_s: f64,
    pub mapping_s: f64,
    pub frames_per_second: f64,
}

/// Summary of one run. Fields that need ground truth are `null` without it.
/// Everything except `runtime` is deterministic for a fixed dataset and config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mask_fusion: bool,
    pub frames: usize,
    pub keyframes: usize,
    pub gaussians: usize,
    pub ate_alignment: Alignment,
    /// All frames, meters.
    pub ate_rmse: Option<f64>,
    pub ate_rmse_keyframes: Option<f64>,
    /// Diagonal of the bounding box of the ground-truth camera positions.
    pub trajectory_extent: Option<f64>,
    /// Mean over keyframes of the PSNR on static pixels, dB.
    #[serde(with = "psnr_json")]
    pub psnr_static: Option<f64>,
    pub mask_iou: Option<f64>,
    pub mask_precision: Option<f64>,
    pub mask_recall: Option<f64>,
    pub ba_runs: usize,
    pub scale_reused: usize,
    pub runtime: RuntimeStats,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The report with its runtime zeroed, for determinism checks.
    pub fn without_runtime(&self) -> Self {
        Self {
            runtime: RuntimeStats::default(),
            ..self.clone()
        }
    }
}

/// Estimated trajectory of a run in TUM convention.
pub fn run_trajectory(out: &PipelineOutput) -> Result<Trajectory> {
    Trajectory::from_world_to_camera(out.trajectory.iter().map(|(_, t, p)| (*t, p)))
}

/// Scores a run against whatever ground truth the dataset carries.
pub fn evaluate_run(ds: &Dataset, out: &PipelineOutput, cfg: &Config) -> Result<EvalReport> {
    let est = run_trajectory(out)?;
    let mut ate_all = None;
    let mut ate_kf = None;
    let mut extent = None;
    if let Some(gt) = &ds.groundtruth {
        ate_all = Some(ate_rmse(&est, gt, cfg.ate_alignment)?);
        let kf_times: Vec<f64> = out.keyframes.iter().map(|&i| ds.frames[i].timestamp).collect();
        let est_kf = est.filter(|t| kf_times.contains(&t));
        ate_kf = ate_rmse(&est_kf, gt, cfg.ate_alignment).ok();
        extent = Some(gt.extent());
    }

    let k = &ds.intrinsics;
    let mut psnr_sum = 0.0;
    let mut psnr_n = 0usize;
    for &i in &out.keyframes {
        let pose = &out.trajectory[i].2;
        let region: MaskImage = match (&ds.gt_masks, out.masks.get(i).and_then(|m| m.as_ref())) {
            (Some(gt), _) => gt[i].map(|&d| !d),
            (None, Some(m)) => m.map(|&d| !d),
            (None, None) => Grid::new(k.width, k.height, true),
        };
        let rendered = render(&out.map, pose, k);
        if let Ok(p) = psnr(&rendered.color, &ds.frames[i].color, &region) {
            psnr_sum += p;
            psnr_n += 1;
        }
    }

    let (mut iou, mut prec, mut rec) = (None, None, None);
    if let Some(gt) = &ds.gt_masks {
        let scores: Vec<(f64, f64, f64)> = out
            .masks
            .iter()
            .zip(gt)
            .filter_map(|(m, g)| m.as_ref().map(|m| mask_scores(m, g)))
            .collect();
        if !scores.is_empty() {
            let n = scores.len() as f64;
            iou = Some(scores.iter().map(|s| s.0).sum::<f64>() / n);
            prec = Some(scores.iter().map(|s| s.1).sum::<f64>() / n);
            rec = Some(scores.iter().map(|s| s.2).sum::<f64>() / n);
        }
    }

    Ok(EvalReport {
        mask_fusion: cfg.mask_fusion,
        frames: ds.len(),
        keyframes: out.keyframes.len(),
        gaussians: out.map.alive_count(),
        ate_alignment: cfg.ate_alignment,
        ate_rmse: ate_all,
        ate_rmse_keyframes: ate_kf,
        trajectory_extent: extent,
        psnr_static: (psnr_n > 0).then(|| psnr_sum / psnr_n as f64),
        mask_iou: iou,
        mask_precision: prec,
        mask_recall: rec,
        ba_runs: out.ba_runs,
        scale_reused: out.scale_reused,
        runtime: RuntimeStats {
            total_s: out.total_s,
            tracking_s: out.tracking_s,
            mapping_s: out.mapping_s,
            frames_per_second: if out.total_s > 0.0 { ds.len() as f64 / out.total_s } else { 0.0 },
        },
    })
}
