//! Unit orientations and the error-state machinery on SO(3).
//!
//! Convention, used throughout the crate:
//!
//! * Quaternions are scalar first, `(w, x, y, z)`, Hamilton product.
//! * `q` is the attitude of the sensor frame in the map frame. Its active
//!   rotation matrix `R(q)` takes sensor-frame vectors to the map frame, so
//!   the map-to-sensor matrix of the measurement model is `C(q) = R(q)ᵀ`.
//! * Errors are right-multiplicative: `q = q̄ ⊗ exp(ε)`, with `ε` a rotation
//!   vector expressed in the sensor frame.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Quaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::linalg::skew;

const SMALL_ANGLE: f64 = 1e-6;

/// Unit quaternion with non-negative scalar part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct UnitOrientation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Default for UnitOrientation {
    fn default() -> Self {
        Self::identity()
    }
}

impl From<[f64; 4]> for UnitOrientation {
    fn from(c: [f64; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<UnitOrientation> for [f64; 4] {
    fn from(q: UnitOrientation) -> Self {
        q.components()
    }
}

impl UnitOrientation {
    pub const fn identity() -> Self {
        Self {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Normalizes the components and resolves the double cover (`w >= 0`).
    /// A zero quaternion yields the identity.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Self::identity();
        }
        let s = if w < 0.0 { -1.0 / n } else { 1.0 / n };
        Self {
            w: w * s,
            x: x * s,
            y: y * s,
            z: z * s,
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        exp_map(&RotationTangent::new(axis * (angle / n)))
    }

    /// Rotation about the map z axis.
    pub fn from_yaw(yaw: f64) -> Self {
        Self::new((0.5 * yaw).cos(), 0.0, 0.0, (0.5 * yaw).sin())
    }

    pub fn components(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn scalar(&self) -> f64 {
        self.w
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    fn quaternion(&self) -> Quaternion<f64> {
        Quaternion::new(self.w, self.x, self.y, self.z)
    }

    /// Active rotation matrix `R(q)` (sensor to map).
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
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

    /// Map-to-sensor matrix `C(q) = R(q)ᵀ` of the measurement model.
    pub fn map_to_sensor(&self) -> Matrix3<f64> {
        self.rotation_matrix().transpose()
    }

    /// Applies the active rotation: `R(q)·v`.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let u = self.vector();
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    /// Applies the inverse rotation: `R(q)ᵀ·v`, i.e. map frame to sensor frame.
    pub fn rotate_inverse(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.inverse().rotate(v)
    }

    pub fn inverse(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self ⊗ rhs`.
    pub fn compose(&self, rhs: &Self) -> Self {
        let p = self.quaternion() * rhs.quaternion();
        Self::new(p.w, p.i, p.j, p.k)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.vector().norm().atan2(self.w)
    }

    /// Angle of the relative rotation between two orientations.
    pub fn angle_to(&self, other: &Self) -> f64 {
        self.inverse().compose(other).angle()
    }
}

/// Rotation vector (axis times angle, radians).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationTangent(pub Vector3<f64>);

impl RotationTangent {
    pub fn new(v: Vector3<f64>) -> Self {
        Self(v)
    }

    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    /// Equivalent rotation vector with magnitude at most π.
    pub fn canonical(&self) -> Self {
        log_map(&exp_map(self))
    }
}

impl From<Vector3<f64>> for RotationTangent {
    fn from(v: Vector3<f64>) -> Self {
        Self(v)
    }
}

pub fn rotate(q: &UnitOrientation, v: &Vector3<f64>) -> Vector3<f64> {
    q.rotate(v)
}

pub fn exp_map(t: &RotationTangent) -> UnitOrientation {
    let v = t.0;
    let theta = v.norm();
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        let s = 0.5 * (1.0 - t2 / 24.0);
        UnitOrientation::new(1.0 - t2 / 8.0, s * v.x, s * v.y, s * v.z)
    } else {
        let s = (0.5 * theta).sin() / theta;
        UnitOrientation::new((0.5 * theta).cos(), s * v.x, s * v.y, s * v.z)
    }
}

pub fn log_map(q: &UnitOrientation) -> RotationTangent {
    let u = q.vector();
    let s = u.norm();
    let w = q.scalar();
    if s < SMALL_ANGLE * w {
        // atan2(s, w)/s ≈ (1 - s²/3w²)/w
        let f = 2.0 / w * (1.0 - s * s / (3.0 * w * w));
        RotationTangent(u * f)
    } else {
        let theta = 2.0 * s.atan2(w);
        RotationTangent(u * (theta.min(PI) / s))
    }
}

/// `q̄ ⊗ exp(ε)`.
pub fn boxplus(nominal: &UnitOrientation, error: &RotationTangent) -> UnitOrientation {
    nominal.compose(&exp_map(error))
}

/// `log(q̄⁻¹ ⊗ q)`, the inverse of [`boxplus`].
pub fn boxminus(q: &UnitOrientation, nominal: &UnitOrientation) -> RotationTangent {
    log_map(&nominal.inverse().compose(q))
}

/// Right Jacobian of SO(3): `exp(φ + δ) ≈ exp(φ)·exp(J_r(φ)·δ)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < SMALL_ANGLE {
        Matrix3::identity() - 0.5 * k + k * k / 6.0
    } else {
        let t2 = theta * theta;
        Matrix3::identity() - (1.0 - theta.cos()) / t2 * k
            + (theta - theta.sin()) / (t2 * theta) * k * k
    }
}
