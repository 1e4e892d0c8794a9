use serde::{Deserialize, Serialize};

use crate::scene_model::SE3Pose;
use nalgebra::Vector6;

/// Parametric rigid motion. Component `j` of the twist `(v, ω)` at frame `t` is
///
/// `velocity[j]·t + amplitude[j]·sin(2πt / period[j]) + triangle[j]·tri(t / triangle_period)`
///
/// where `tri` is a unit triangle wave starting at 0 and rising. The pose is
/// the exponential of that twist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub velocity: [f64; 6],
    pub amplitude: [f64; 6],
    pub period: [f64; 6],
    pub triangle: [f64; 6],
    pub triangle_period: f64,
}

impl MotionSpec {
    pub fn still() -> Self {
        Self {
            velocity: [0.0; 6],
            amplitude: [0.0; 6],
            period: [1.0; 6],
            triangle: [0.0; 6],
            triangle_period: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = self
            .velocity
            .iter()
            .chain(&self.amplitude)
            .chain(&self.period)
            .chain(&self.triangle);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err("non-finite motion parameter".into());
        }
        if self.period.iter().any(|&p| p <= 0.0) || self.triangle_period <= 0.0 {
            return Err("periods must be positive".into());
        }
        Ok(())
    }

    pub fn twist(&self, t: f64) -> Vector6<f64> {
        let phase = (t / self.triangle_period).rem_euclid(1.0);
        // 0 → 1 → 0 → -1 → 0 over one period
        let tri = if phase < 0.25 {
            4.0 * phase
        } else if phase < 0.75 {
            2.0 - 4.0 * phase
        } else {
            4.0 * phase - 4.0
        };
        Vector6::from_fn(|j, _| {
            self.velocity[j] * t
                + self.amplitude[j] * (std::f64::consts::TAU * t / self.period[j]).sin()
                + self.triangle[j] * tri
        })
    }

    pub fn pose(&self, t: f64) -> SE3Pose {
        SE3Pose::exp(&self.twist(t))
    }
}
