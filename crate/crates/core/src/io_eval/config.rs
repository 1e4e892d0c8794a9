use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use super::metrics::Alignment;
use crate::dyn_sim::{NoiseConfig, SimConfig};
use crate::error::{Error, Result};
use crate::mapper::{LearningRates, MapperConfig, MaskedLossWeights, OptimizeConfig};
use crate::mask_fusion::PosteriorParams;
use crate::scene_model::CameraIntrinsics;
use crate::tracker::{BaConfig, PoseSolverConfig, TrackerConfig};

/// Accepts `true`/`false` as well as `"on"`/`"off"`.
fn flag<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    match Value::deserialize(d)? {
        Value::Bool(b) => Ok(b),
        Value::String(s) => parse_flag(&s).ok_or_else(|| serde::de::Error::custom(format!("not a flag: {s:?}"))),
        other => Err(serde::de::Error::custom(format!("not a flag: {other}"))),
    }
}

fn parse_flag(s: &str) -> Option<bool> {
    match s {
        "on" | "true" | "1" | "yes" => Some(true),
        "off" | "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Every tunable of the system as one flat JSON object. Unknown keys are
/// rejected; missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    // simulation
    pub seed: u64,
    pub n_frames: usize,
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub n_background: usize,
    pub object_gaussians: usize,
    pub object_extent: f64,
    pub flow_sigma: f64,
    pub depth_noise_rel: f64,
    pub depth_scale_min: f64,
    pub depth_scale_max: f64,
    pub mask_flip_fp: f64,
    pub mask_flip_fn: f64,

    // tracking
    #[serde(deserialize_with = "flag")]
    pub mask_fusion: bool,
    /// Use the dataset's `mask/` segmentation as the flow cue when present.
    #[serde(deserialize_with = "flag")]
    pub use_ingested_masks: bool,
    pub tau_f: f64,
    pub tau_d: f64,
    pub k_max: usize,
    pub prior: f64,
    pub tpr_f: f64,
    pub fpr_f: f64,
    pub tpr_d: f64,
    pub fpr_d: f64,
    pub posterior_threshold: f64,
    pub huber_delta: f64,
    pub pose_max_iters: usize,
    pub pose_step_tol: f64,
    pub pose_divergence_factor: f64,
    pub pose_min_pixels: usize,
    #[serde(deserialize_with = "flag")]
    pub ba_enabled: bool,
    pub ba_window: usize,
    pub ba_max_iters: usize,
    pub ba_step_tol: f64,
    pub ba_prior_sigma_t: f64,
    pub ba_prior_sigma_r: f64,
    pub min_render_weight: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,

    // mapping
    pub insert_stride: usize,
    #[serde(deserialize_with = "flag")]
    pub prune_enabled: bool,
    pub prune_weight: f64,
    pub iters_per_keyframe: usize,
    pub map_window: usize,
    pub final_refine_iters: usize,
    pub lambda_d: f64,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub lambda_m: f64,
    pub lambda_g: f64,
    pub lr_position: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    #[serde(deserialize_with = "flag")]
    pub accept_only_improving: bool,

    // pipeline and evaluation
    pub queue_capacity: usize,
    pub ate_alignment: Alignment,
}

impl Default for Config {
    fn default() -> Self {
        let sim = SimConfig::default();
        let obj = &sim.objects[0];
        let t = TrackerConfig::default();
        let m = MapperConfig::default();
        let lr = m.optimize.lr;
        Self {
            seed: sim.seed,
            n_frames: sim.n_frames,
            fps: sim.fps,
            width: sim.intrinsics.width,
            height: sim.intrinsics.height,
            fx: sim.intrinsics.fx,
            fy: sim.intrinsics.fy,
            cx: sim.intrinsics.cx,
            cy: sim.intrinsics.cy,
            n_background: sim.n_background,
            object_gaussians: obj.n_gaussians,
            object_extent: obj.extent,
            flow_sigma: sim.noise.flow_sigma,
            depth_noise_rel: sim.noise.depth_noise_rel,
            depth_scale_min: sim.noise.depth_scale_range.0,
            depth_scale_max: sim.noise.depth_scale_range.1,
            mask_flip_fp: sim.noise.mask_flip_fp,
            mask_flip_fn: sim.noise.mask_flip_fn,

            mask_fusion: t.mask_fusion,
            use_ingested_masks: true,
            tau_f: t.tau_f,
            tau_d: t.tau_d,
            k_max: t.k_max,
            prior: t.posterior.prior,
            tpr_f: t.posterior.tpr_f,
            fpr_f: t.posterior.fpr_f,
            tpr_d: t.posterior.tpr_d,
            fpr_d: t.posterior.fpr_d,
            posterior_threshold: t.posterior.threshold,
            huber_delta: t.solver.huber_delta,
            pose_max_iters: t.solver.max_iters,
            pose_step_tol: t.solver.step_tol,
            pose_divergence_factor: t.solver.divergence_factor,
            pose_min_pixels: t.solver.min_pixels,
            ba_enabled: t.ba_enabled,
            ba_window: t.ba_window,
            ba_max_iters: t.ba.max_iters,
            ba_step_tol: t.ba.step_tol,
            ba_prior_sigma_t: t.ba.prior_sigma_translation,
            ba_prior_sigma_r: t.ba.prior_sigma_rotation,
            min_render_weight: t.min_render_weight,
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            epsilon: t.epsilon,

            insert_stride: m.stride,
            prune_enabled: m.prune_enabled,
            prune_weight: m.prune_weight,
            iters_per_keyframe: m.iters_per_keyframe,
            map_window: m.window,
            final_refine_iters: 0,
            lambda_d: m.weights.lambda_d,
            lambda_s: m.weights.lambda_s,
            lambda_t: m.weights.lambda_t,
            lambda_m: m.weights.lambda_m,
            lambda_g: m.weights.lambda_g,
            lr_position: lr.position,
            lr_color: lr.color,
            lr_opacity: lr.opacity,
            lr_scale: lr.scale,
            lr_rotation: lr.rotation,
            adam_beta1: m.optimize.beta1,
            adam_beta2: m.optimize.beta2,
            adam_eps: m.optimize.eps,
            accept_only_improving: m.optimize.accept_only_improving,

            queue_capacity: 4,
            ate_alignment: Alignment::Similarity,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::default()).expect("config serializes") {
            Value::Object(m) => m.keys().cloned().collect(),
            _ => unreachable!("config is an object"),
        }
    }

    /// Sets one key from its command-line text. Flags take on/off/true/false,
    /// numbers parse as JSON numbers, strings are taken verbatim.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut obj = match serde_json::to_value(&*self)? {
            Value::Object(m) => m,
            _ => unreachable!("config is an object"),
        };
        let current = obj
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        let bad = || Error::Config(format!("bad value {raw:?} for {key}"));
        let value = match current {
            Value::Bool(_) => Value::Bool(parse_flag(raw).ok_or_else(bad)?),
            Value::Number(_) => serde_json::from_str::<serde_json::Number>(raw)
                .map(Value::Number)
                .map_err(|_| bad())?,
            _ => Value::String(raw.to_string()),
        };
        obj.insert(key.to_string(), value);
        *self = serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Applies `--key=value` arguments in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        for a in args {
            let a = a.as_ref();
            let body = a
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected --key=value, got {a:?}")))?;
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected --key=value, got {a:?}")))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let mut sim = SimConfig {
            seed: self.seed,
            intrinsics: self.intrinsics()?,
            n_background: self.n_background,
            n_frames: self.n_frames,
            fps: self.fps,
            noise: NoiseConfig {
                flow_sigma: self.flow_sigma,
                depth_noise_rel: self.depth_noise_rel,
                depth_scale_range: (self.depth_scale_min, self.depth_scale_max),
                mask_flip_fp: self.mask_flip_fp,
                mask_flip_fn: self.mask_flip_fn,
            },
            ..SimConfig::default()
        };
        if self.object_gaussians == 0 {
            sim.objects.clear();
        } else {
            for o in &mut sim.objects {
                o.n_gaussians = self.object_gaussians;
                o.extent = self.object_extent;
            }
        }
        sim.validate()?;
        Ok(sim)
    }

    pub fn tracker_config(&self) -> Result<TrackerConfig> {
        let cfg = TrackerConfig {
            mask_fusion: self.mask_fusion,
            tau_f: self.tau_f,
            tau_d: self.tau_d,
            k_max: self.k_max,
            posterior: PosteriorParams {
                prior: self.prior,
                tpr_f: self.tpr_f,
                fpr_f: self.fpr_f,
                tpr_d: self.tpr_d,
                fpr_d: self.fpr_d,
                threshold: self.posterior_threshold,
            },
            solver: PoseSolverConfig {
                huber_delta: self.huber_delta,
                max_iters: self.pose_max_iters,
                step_tol: self.pose_step_tol,
                divergence_factor: self.pose_divergence_factor,
                min_pixels: self.pose_min_pixels,
            },
            ba_enabled: self.ba_enabled,
            ba: BaConfig {
                max_iters: self.ba_max_iters,
                step_tol: self.ba_step_tol,
                prior_sigma_translation: self.ba_prior_sigma_t,
                prior_sigma_rotation: self.ba_prior_sigma_r,
            },
            ba_window: self.ba_window,
            min_render_weight: self.min_render_weight,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            epsilon: self.epsilon,
        };
        cfg.posterior.validate().map_err(|e| Error::Config(e.to_string()))?;
        cfg.ba.validate()?;
        if !(cfg.tau_f > 0.0 && cfg.tau_d > 0.0 && cfg.k_max > 0 && cfg.solver.huber_delta > 0.0) {
            return Err(Error::Config("tau_f, tau_d, k_max and huber_delta must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn mapper_config(&self) -> Result<MapperConfig> {
        let cfg = MapperConfig {
            stride: self.insert_stride,
            prune_enabled: self.prune_enabled,
            prune_weight: self.prune_weight,
            iters_per_keyframe: self.iters_per_keyframe,
            window: self.map_window,
            weights: MaskedLossWeights {
                lambda_d: self.lambda_d,
                lambda_s: self.lambda_s,
                lambda_t: self.lambda_t,
                lambda_m: self.lambda_m,
                lambda_g: self.lambda_g,
            },
            optimize: OptimizeConfig {
                lr: LearningRates {
                    position: self.lr_position,
                    color: self.lr_color,
                    opacity: self.lr_opacity,
                    scale: self.lr_scale,
                    rotation: self.lr_rotation,
                },
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
                accept_only_improving: self.accept_only_improving,
            },
        };
        cfg.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        if cfg.stride == 0 || cfg.window == 0 {
            return Err(Error::Config("insert_stride and map_window must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim_config()?;
        self.tracker_config()?;
        self.mapper_config()?;
        if self.queue_capacity == 0 {
            return Err(Error::Config("queue_capacity must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(Config::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(Config::from_json("{}").unwrap(), c);
        assert_eq!(c.tracker_config().unwrap(), TrackerConfig::default());
        assert_eq!(c.mapper_config().unwrap(), MapperConfig::default());
        assert_eq!(c.sim_config().unwrap(), SimConfig::default());
    }

    #[test]
    fn overrides() {
        let mut c = Config::default();
        c.apply_overrides(&["--mask_fusion=off", "--tau_f=2.5", "--seed=9", "--ate_alignment=rigid"]).unwrap();
        assert!(!c.mask_fusion);
        assert_eq!(c.tau_f, 2.5);
        assert_eq!(c.seed, 9);
        assert_eq!(c.ate_alignment, Alignment::Rigid);
        assert!(matches!(c.apply_overrides(&["--bogus=1"]), Err(Error::Config(_))));
        assert!(matches!(c.apply_overrides(&["--seed=abc"]), Err(Error::Config(_))));
        assert!(matches!(c.apply_overrides(&["--seed=-1"]), Err(Error::Config(_))));
        assert!(matches!(c.apply_overrides(&["--mask_fusion=maybe"]), Err(Error::Config(_))));
        assert!(matches!(c.apply_overrides(&["--ate_alignment=best"]), Err(Error::Config(_))));
        assert!(matches!(c.apply_overrides(&["tau_f=1"]), Err(Error::Config(_))));
    }

    #[test]
    fn json_flags_and_unknown_keys() {
        let c = Config::from_json(r#"{"mask_fusion": "off", "ba_enabled": false}"#).unwrap();
        assert!(!c.mask_fusion && !c.ba_enabled);
        assert!(matches!(Config::from_json(r#"{"mask_fusio": true}"#), Err(Error::Config(_))));
        assert!(Config::keys().contains(&"lambda_g".to_string()));
    }
}
