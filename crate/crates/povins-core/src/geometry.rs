//! Rotation algebra and the error conventions used by the filter.
//!
//! Rotation errors are three-vectors `phi` applied multiplicatively on the
//! global side, `q = dq ⊗ q_est` with `dq = [1, phi/2]` to first order.
//! Velocity and position errors are the Lie-group transformed ("ST") errors
//! `dv_st = -dv + [v×] phi`, `dp_st = -dp + [p×] phi`, which keep the
//! propagation Jacobian independent of the estimated trajectory wherever
//! possible. Retractions use the exact SO(3) exponential so repeated updates
//! stay on the manifold.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

/// Antisymmetric (cross-product) matrix of `v`: `skew(v) * w == v × w`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) exponential map (axis-angle vector to rotation matrix).
pub fn exp_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-9 {
        // 2nd-order series; error O(theta^3)
        Matrix3::identity() + k + 0.5 * k * k
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / (theta * theta);
        Matrix3::identity() + a * k + b * k * k
    }
}

/// SO(3) logarithm map. Handles the near-pi branch via the diagonal of the
/// symmetric part.
pub fn log_so3(rot: &Matrix3<f64>) -> Vector3<f64> {
    let trace = rot.trace();
    let cos_theta = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    if theta < 1e-7 {
        // vee of the antisymmetric part, first order
        return Vector3::new(
            rot[(2, 1)] - rot[(1, 2)],
            rot[(0, 2)] - rot[(2, 0)],
            rot[(1, 0)] - rot[(0, 1)],
        ) * 0.5;
    }
    if std::f64::consts::PI - theta < 1e-5 {
        // near pi the antisymmetric part degenerates; recover the axis from
        // R + I whose columns are parallel to the axis
        let m = rot + Matrix3::identity();
        let col = (0..3)
            .map(|i| m.column(i).into_owned())
            .max_by(|a, b| a.norm().total_cmp(&b.norm()))
            .unwrap();
        let axis = col.normalize();
        // fix the sign using the off-diagonal antisymmetric residue
        let vee = Vector3::new(
            rot[(2, 1)] - rot[(1, 2)],
            rot[(0, 2)] - rot[(2, 0)],
            rot[(1, 0)] - rot[(0, 1)],
        );
        let axis = if vee.dot(&axis) < 0.0 { -axis } else { axis };
        return axis * theta;
    }
    let vee = Vector3::new(
        rot[(2, 1)] - rot[(1, 2)],
        rot[(0, 2)] - rot[(2, 0)],
        rot[(1, 0)] - rot[(0, 1)],
    );
    vee * (theta / (2.0 * theta.sin()))
}

/// Canonicalize a unit quaternion to `w >= 0` so golden comparisons are
/// deterministic.
pub fn canonical(q: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(Quaternion::new(-q.w, -q.i, -q.j, -q.k))
    } else {
        *q
    }
}

/// Quaternion of the exact SO(3) exponential of `phi`.
pub fn quat_exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = phi.norm();
    if theta < 1e-12 {
        canonical(&UnitQuaternion::new_unchecked(
            Quaternion::new(1.0, 0.5 * phi.x, 0.5 * phi.y, 0.5 * phi.z).normalize(),
        ))
    } else {
        let half = 0.5 * theta;
        let s = half.sin() / theta;
        canonical(&UnitQuaternion::new_unchecked(Quaternion::new(
            half.cos(),
            s * phi.x,
            s * phi.y,
            s * phi.z,
        )))
    }
}

/// Apply the multiplicative quaternion error: `q = dq ⊗ q_est` with
/// `dq = exp(phi/2)` (exact-exponential retraction of the first-order
/// `[1, phi/2]` error).
pub fn apply_quat_error(phi: &Vector3<f64>, q_est: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    canonical(&(quat_exp(phi) * q_est))
}

/// Extract the rotation error `phi` such that `q ≈ exp(phi) ⊗ q_est`.
/// Exact inverse of [`apply_quat_error`] for |phi| < pi.
pub fn extract_quat_error(q: &UnitQuaternion<f64>, q_est: &UnitQuaternion<f64>) -> Vector3<f64> {
    let dq = q * q_est.inverse();
    log_so3(dq.to_rotation_matrix().matrix())
}

/// Rotation-matrix form of [`apply_quat_error`]: `R = exp(phi) * R_est`.
pub fn apply_rot_error(phi: &Vector3<f64>, rot_est: &Matrix3<f64>) -> Matrix3<f64> {
    exp_so3(phi) * rot_est
}

/// Transform standard additive velocity/position errors into the ST errors:
/// `dv_st = -dv + [v×] phi`, `dp_st = -dp + [p×] phi`.
pub fn st_error_from_standard(
    dv: &Vector3<f64>,
    dp: &Vector3<f64>,
    phi: &Vector3<f64>,
    v: &Vector3<f64>,
    p: &Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    (-dv + skew(v) * phi, -dp + skew(p) * phi)
}

/// Rigid body pose: rotation is frame-to-global, translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_quat(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: *q.to_rotation_matrix().matrix(),
            translation,
        }
    }

    /// Compose `self ∘ other` as SE(3) elements.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}
