use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector6};

const ORTHO_DRIFT: f64 = 1e-9;

/// Rigid transform `x -> R x + t`.
///
/// Twists are ordered `(v, ω)`: translational part first, rotational part last.
/// `retract` applies the increment on the left, so for a world-to-camera pose the
/// increment is expressed in the camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SE3Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

#[inline]
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rotation matrix of a (not necessarily normalized) quaternion; the quaternion is
/// normalized first.
pub fn quat_to_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Closest rotation in the Frobenius sense.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

fn rotation_drift(r: &Matrix3<f64>) -> f64 {
    let e = r.transpose() * r - Matrix3::identity();
    e.abs().max().max((r.determinant() - 1.0).abs())
}

/// `exp` of a rotation vector via Rodrigues.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = hat(w);
    let (a, b) = if theta2 < 1e-12 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = hat(w);
    let (b, c) = if theta2 < 1e-12 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * b + k * k * c
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn from_quaternion(q: &Quaternion<f64>, translation: Vector3<f64>) -> Self {
        Self::new(quat_to_matrix(q), translation)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::new(so3_exp(&Vector3::new(0.0, 0.0, angle)), Vector3::zeros())
    }

    /// Unit quaternion with non-negative `w`.
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
            self.rotation,
        ));
        if q.w < 0.0 {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && rotation_drift(&self.rotation) <= tol
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        let mut rotation = self.rotation * other.rotation;
        if rotation_drift(&rotation) > ORTHO_DRIFT {
            rotation = orthonormalize(&rotation);
        }
        SE3Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let rt = self.rotation.transpose();
        SE3Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn exp(twist: &Vector6<f64>) -> SE3Pose {
        let v = Vector3::new(twist[0], twist[1], twist[2]);
        let w = Vector3::new(twist[3], twist[4], twist[5]);
        SE3Pose {
            rotation: so3_exp(&w),
            translation: so3_left_jacobian(&w) * v,
        }
    }

    pub fn log(&self) -> Vector6<f64> {
        let w = Rotation3::from_matrix_unchecked(self.rotation).scaled_axis();
        let v = so3_left_jacobian(&w)
            .try_inverse()
            .expect("left jacobian is invertible for |w| < 2π")
            * self.translation;
        Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z)
    }

    /// `exp(twist) ∘ self`. A zero twist returns `self` bit-for-bit.
    pub fn retract(&self, twist: &Vector6<f64>) -> SE3Pose {
        if twist.iter().all(|&v| v == 0.0) {
            return *self;
        }
        SE3Pose::exp(twist).compose(self)
    }

    /// Camera center in world coordinates, treating `self` as world-to-camera.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn max_abs_diff(&self, other: &SE3Pose) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }
}
