//! SE(3) pose type and Lie-group operations.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};

use super::GeometryError;

/// Below this rotation magnitude the closed-form coefficients switch to
/// their Taylor series.
const SMALL_ANGLE: f64 = 1e-4;

/// Margin kept away from the pi singularity of the logarithm.
const LOG_GUARD: f64 = 1e-9;

/// A rigid transform mapping world coordinates into camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// From raw quaternion components (x, y, z, w) and a translation.
    /// The quaternion is normalized on entry.
    pub fn from_xyzw(qx: f64, qy: f64, qz: f64, qw: f64, t: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        Self { rotation: q, translation: t }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self` applied after `rhs`: `(self * rhs) * x = self * (rhs * x)`.
    pub fn compose(&self, rhs: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let rot_inv = self.rotation.inverse();
        SE3Pose { rotation: rot_inv, translation: -(rot_inv * self.translation) }
    }

    /// Left-multiplied increment `exp(delta) * self`.
    pub fn left_update(&self, delta: &Vector6<f64>) -> SE3Pose {
        se3_exp(delta).compose(self)
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Coefficients of `V = I + a*Phi + b*Phi^2` for the translation part of the
/// exponential, with series fallbacks near zero.
fn v_coefficients(angle: f64) -> (f64, f64) {
    if angle < SMALL_ANGLE {
        let a2 = angle * angle;
        (0.5 - a2 / 24.0 + a2 * a2 / 720.0, 1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0)
    } else {
        let a2 = angle * angle;
        ((1.0 - angle.cos()) / a2, (angle - angle.sin()) / (a2 * angle))
    }
}

/// Exponential map from a twist `[translation, rotation]` to a pose.
pub fn se3_exp(xi: &Vector6<f64>) -> SE3Pose {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let phi = Vector3::new(xi[3], xi[4], xi[5]);
    let angle = phi.norm();
    let rotation = UnitQuaternion::from_scaled_axis(phi);
    let (a, b) = v_coefficients(angle);
    let phi_hat = skew(&phi);
    let v = Matrix3::identity() + phi_hat * a + phi_hat * phi_hat * b;
    SE3Pose { rotation, translation: v * rho }
}

/// Rotation logarithm, guarded against the pi branch ambiguity.
fn so3_log(q: &UnitQuaternion<f64>) -> Result<Vector3<f64>, GeometryError> {
    // Take the representative on the w >= 0 hemisphere so the returned
    // angle lies in [0, pi].
    let mut w = q.w;
    let mut v = Vector3::new(q.i, q.j, q.k);
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    let angle = 2.0 * s.atan2(w);
    if angle >= std::f64::consts::PI - LOG_GUARD {
        return Err(GeometryError::LogSingularity { angle });
    }
    if s < 1e-12 {
        // angle/sin(angle/2) -> 2 as angle -> 0
        Ok(v * (2.0 / w))
    } else {
        Ok(v * (angle / s))
    }
}

/// Logarithm map from a pose to its twist `[translation, rotation]`.
///
/// Fails with [`GeometryError::LogSingularity`] when the rotation angle is
/// within `1e-9` of pi.
pub fn se3_log(pose: &SE3Pose) -> Result<Vector6<f64>, GeometryError> {
    let phi = so3_log(&pose.rotation)?;
    let angle = phi.norm();
    let phi_hat = skew(&phi);
    // V^{-1} = I - Phi/2 + c * Phi^2
    let c = if angle < SMALL_ANGLE {
        1.0 / 12.0 + angle * angle / 720.0
    } else {
        let half = 0.5 * angle;
        (1.0 - half * half.cos() / half.sin()) / (angle * angle)
    };
    let v_inv = Matrix3::identity() - phi_hat * 0.5 + phi_hat * phi_hat * c;
    let rho = v_inv * pose.translation;
    Ok(Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z))
}

/// Geodesic interpolation `a * exp(t * log(a^{-1} * b))`.
///
/// Exact at the endpoints; fails when the relative rotation sits on the
/// logarithm singularity.
pub fn se3_interpolate(a: &SE3Pose, b: &SE3Pose, t: f64) -> Result<SE3Pose, GeometryError> {
    let rel = a.inverse().compose(b);
    let xi = se3_log(&rel)?;
    Ok(a.compose(&se3_exp(&(xi * t))))
}
