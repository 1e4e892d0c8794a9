use nalgebra::{Matrix3, Quaternion, Vector3};

use super::se3::quat_to_matrix;
use crate::error::{Error, Result};

pub type GaussianId = u64;
pub type KeyframeId = usize;

/// One anisotropic 3D Gaussian. `scale` holds per-axis standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub id: GaussianId,
    pub position: Vector3<f64>,
    pub rotation: Quaternion<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub anchor_keyframe: KeyframeId,
    pub alive: bool,
}

impl Gaussian {
    pub fn isotropic(
        position: Vector3<f64>,
        sigma: f64,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Self {
        Self {
            id: 0,
            position,
            rotation: Quaternion::identity(),
            scale: Vector3::repeat(sigma),
            opacity,
            color,
            anchor_keyframe: 0,
            alive: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let qn = self.rotation.norm();
        if (qn - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "gaussian {} quaternion norm {qn}",
                self.id
            )));
        }
        if !self.scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "gaussian {} has non-positive scale",
                self.id
            )));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::InvalidInput(format!(
                "gaussian {} opacity {} outside [0,1]",
                self.id, self.opacity
            )));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::InvalidInput(format!(
                "gaussian {} color outside [0,1]",
                self.id
            )));
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "gaussian {} position not finite",
                self.id
            )));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_3d(&self.rotation, &self.scale)
    }
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(scale)`.
pub fn covariance_3d(rotation: &Quaternion<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = quat_to_matrix(rotation);
    let s2 = Matrix3::from_diagonal(&scale.component_mul(scale));
    let sigma = r * s2 * r.transpose();
    // exact symmetry
    (sigma + sigma.transpose()) * 0.5
}

/// The map: an append-only list of Gaussians; pruning flips `alive`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianMap {
    pub gaussians: Vec<Gaussian>,
    pub next_id: GaussianId,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Assigns a fresh identifier and appends.
    pub fn insert(&mut self, mut g: Gaussian) -> GaussianId {
        g.id = self.next_id;
        self.next_id += 1;
        let id = g.id;
        self.gaussians.push(g);
        id
    }

    pub fn extend(&mut self, gs: impl IntoIterator<Item = Gaussian>) {
        for g in gs {
            self.insert(g);
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn alive_count(&self) -> usize {
        self.gaussians.iter().filter(|g| g.alive).count()
    }

    pub fn alive(&self) -> impl Iterator<Item = &Gaussian> {
        self.gaussians.iter().filter(|g| g.alive)
    }

    /// Largest distance of an alive Gaussian from the alive centroid; 1.0 for an empty map.
    pub fn extent(&self) -> f64 {
        let n = self.alive_count();
        if n == 0 {
            return 1.0;
        }
        let centroid = self
            .alive()
            .fold(Vector3::zeros(), |acc, g| acc + g.position)
            / n as f64;
        let r = self
            .alive()
            .map(|g| (g.position - centroid).norm())
            .fold(0.0, f64::max);
        if r > 0.0 {
            r
        } else {
            1.0
        }
    }
}
