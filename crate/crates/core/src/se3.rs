//! Rigid-body transforms in SE(3).
//!
//! Poses are stored as a unit quaternion plus translation and act on points as
//! `x ↦ R·x + t`. Twists are ordered `(omega, v)`: rotation first, then
//! translation. Every pose increment in the crate is applied on the left,
//! `g ← exp(ξ) ∘ g`, and all Jacobians are taken with respect to that left
//! perturbation.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this rotation norm the closed forms switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// `log` refuses rotations closer than this to a half turn.
/// Below this angle the `V` and `V⁻¹` coefficients use their series.
pub const SERIES_ANGLE: f64 = 1e-2;
pub const NEAR_PI_MARGIN: f64 = 1e-6;

/// An element of the Lie algebra se(3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    /// Rotation vector in radians.
    pub omega: Vector3<f64>,
    /// Translational part in scene units.
    pub v: Vector3<f64>,
}

impl Twist {
    pub const fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Twist { omega, v }
    }

    pub fn zero() -> Self {
        Twist::new(Vector3::zeros(), Vector3::zeros())
    }

    /// Builds a twist from `[wx, wy, wz, vx, vy, vz]`.
    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Twist::new(
            Vector3::new(x[0], x[1], x[2]),
            Vector3::new(x[3], x[4], x[5]),
        )
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        )
    }

    /// Euclidean norm of the stacked 6-vector.
    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn scale(&self, s: f64) -> Self {
        Twist::new(self.omega * s, self.v * s)
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

/// Skew-symmetric matrix with `hat(a) * b == a × b`.
pub fn hat(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// A rigid transform `x ↦ R·x + t`.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl fmt::Debug for PoseSE3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.quaternion();
        write!(
            f,
            "PoseSE3 {{ q: [{}, {}, {}, {}], t: [{}, {}, {}] }}",
            q.w, q.i, q.j, q.k, self.translation.x, self.translation.y, self.translation.z
        )
    }
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Renormalizes `rotation` on construction.
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        PoseSE3 {
            rotation: renormalize(rotation.into_inner()),
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        PoseSE3::new(UnitQuaternion::identity(), t)
    }

    #[inline]
    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let q = self.rotation.quaternion();
        let (w, vn) = (q.w.abs(), q.imag().norm());
        2.0 * vn.atan2(w)
    }

    /// Applies the transform to a point.
    #[inline]
    pub fn act(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: renormalize(self.rotation.quaternion() * other.rotation.quaternion()),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let r_inv = self.rotation.inverse();
        PoseSE3 {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    /// Exponential map with Rodrigues rotation and the left Jacobian `V` for
    /// the translation.
    pub fn exp(xi: &Twist) -> PoseSE3 {
        let theta = xi.omega.norm();
        let w = hat(&xi.omega);
        let w2 = w * w;
        let t2 = theta * theta;
        let q = if theta < SMALL_ANGLE {
            let half = xi.omega * 0.5;
            Quaternion::new(1.0, half.x, half.y, half.z)
        } else {
            let (s, c) = (0.5 * theta).sin_cos();
            let axis = xi.omega * (s / theta);
            Quaternion::new(c, axis.x, axis.y, axis.z)
        };
        let (a, b) = if theta < SERIES_ANGLE {
            (
                0.5 - t2 / 24.0 + t2 * t2 / 720.0,
                1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            )
        } else {
            let s = (0.5 * theta).sin();
            (2.0 * s * s / t2, (theta - theta.sin()) / (t2 * theta))
        };
        let v_mat = Matrix3::identity() + w * a + w2 * b;
        PoseSE3 {
            rotation: renormalize(q),
            translation: v_mat * xi.v,
        }
    }

    /// Logarithm map, the inverse of [`PoseSE3::exp`] for angles below π.
    pub fn log(&self) -> Result<Twist> {
        let mut q = *self.rotation.quaternion();
        if q.w < 0.0 {
            q = -q;
        }
        let imag = q.imag();
        let vn = imag.norm();
        let theta = 2.0 * vn.atan2(q.w);
        if theta >= std::f64::consts::PI - NEAR_PI_MARGIN {
            return Err(Error::AngleNearPi { angle: theta });
        }
        let omega = if theta < SMALL_ANGLE {
            // theta / sin(theta/2) ≈ 2 (1 + theta²/24)
            imag * (2.0 / q.w) * (1.0 - vn * vn / (3.0 * q.w * q.w))
        } else {
            imag * (theta / vn)
        };
        let w = hat(&omega);
        let w2 = w * w;
        let t2 = theta * theta;
        let coeff = if theta < SERIES_ANGLE {
            1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
        } else {
            let s = (0.5 * theta).sin();
            (1.0 - theta * theta.sin() / (4.0 * s * s)) / t2
        };
        let v_inv = Matrix3::identity() - w * 0.5 + w2 * coeff;
        Ok(Twist::new(omega, v_inv * self.translation))
    }

    /// Left retraction `exp(dxi) ∘ self`.
    pub fn retract(&self, dxi: &Twist) -> PoseSE3 {
        PoseSE3::exp(dxi).compose(self)
    }

    /// Relative transform `g_j ∘ g_i⁻¹`, mapping frame-`i` coordinates into
    /// frame `j` when poses are world-to-camera.
    pub fn relative(g_i: &PoseSE3, g_j: &PoseSE3) -> PoseSE3 {
        g_j.compose(&g_i.inverse())
    }

    /// Adjoint in `(omega, v)` ordering: `exp(Ad·ξ) = g ∘ exp(ξ) ∘ g⁻¹`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let tr = hat(&self.translation) * r;
        let mut adj = Matrix6::zeros();
        adj.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        adj.fixed_view_mut::<3, 3>(3, 0).copy_from(&tr);
        adj.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        adj
    }

    pub fn is_finite(&self) -> bool {
        let q = self.rotation.quaternion();
        q.coords.iter().chain(self.translation.iter()).all(|x| x.is_finite())
    }
}

impl Mul for PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        self.compose(&rhs)
    }
}

impl Mul<&PoseSE3> for &PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, rhs: &PoseSE3) -> PoseSE3 {
        self.compose(rhs)
    }
}

fn renormalize(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q)
}

/// Largest absolute component difference between two poses, comparing the
/// quaternions up to sign.
pub fn pose_distance(a: &PoseSE3, b: &PoseSE3) -> f64 {
    let qa = a.rotation.quaternion().coords;
    let mut qb = b.rotation.quaternion().coords;
    if qa.dot(&qb) < 0.0 {
        qb = -qb;
    }
    let dq = (qa - qb).amax();
    let dt = (a.translation - b.translation).amax();
    dq.max(dt)
}
