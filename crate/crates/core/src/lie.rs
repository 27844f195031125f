//! Rigid-body primitives: rotations, SE(3) poses and the decoupled tangent
//! deltas used to refine them.
//!
//! A [`TangentDelta`] carries an axis-angle rotation and a raw translation
//! that are exponentiated independently (no coupled V-matrix). Deltas refine
//! poses either by right-multiplication ([`apply_right_delta`], the scheme
//! used throughout refinement) or by left-multiplication
//! ([`apply_left_delta`], kept for comparison).

use core::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};

use crate::fmath;

/// Below this angle Rodrigues' formula switches to its second-order Taylor
/// expansion.
const SMALL_ANGLE: f64 = 1e-8;

/// 3D rotation stored as an orthonormal matrix with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix, checking orthonormality and handedness within `tol`.
    pub fn from_matrix(m: Matrix3<f64>, tol: f64) -> Option<Self> {
        let err = (m.transpose() * m - Matrix3::identity()).abs().max();
        if err <= tol && (m.determinant() - 1.0).abs() <= tol {
            Some(Rotation(m))
        } else {
            None
        }
    }

    /// Wraps a matrix without checking; callers guarantee it is a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Rodrigues exponential of an axis-angle vector.
    pub fn exp(w: &Vector3<f64>) -> Self {
        let theta = w.norm();
        let k = skew(w);
        let k2 = k * k;
        if theta < SMALL_ANGLE {
            return Rotation(Matrix3::identity() + k + k2 * 0.5);
        }
        let a = fmath::sin(theta) / theta;
        let b = (1.0 - fmath::cos(theta)) / (theta * theta);
        Rotation(Matrix3::identity() + k * a + k2 * b)
    }

    /// Axis-angle vector of this rotation, angle in `[0, π]`.
    pub fn log(&self) -> Vector3<f64> {
        let m = &self.0;
        let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5;
        let sin_t = s.norm();
        let cos_t = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = fmath::atan2(sin_t, cos_t);
        if theta < SMALL_ANGLE {
            return s;
        }
        if cos_t > -0.99 {
            return s * (theta / sin_t);
        }
        // Near π the skew part vanishes; recover the axis from the symmetric part.
        let sym = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos_t;
        let mut col = 0;
        for c in 1..3 {
            if sym[(c, c)] > sym[(col, col)] {
                col = c;
            }
        }
        let mut axis: Vector3<f64> = sym.column(col).into_owned();
        axis /= axis.norm();
        if axis.dot(&s) < 0.0 {
            axis = -axis;
        }
        axis * theta
    }

    /// Rotation angle in radians, accurate near both 0 and π.
    pub fn angle(&self) -> f64 {
        let m = &self.0;
        let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5;
        fmath::atan2(s.norm(), (m.trace() - 1.0) * 0.5)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Projects the stored matrix back onto SO(3) by Gram-Schmidt on its
    /// columns. Only needed after long chains of compositions.
    pub fn renormalized(&self) -> Self {
        let c0 = self.0.column(0).normalize();
        let c1 = self.0.column(1);
        let c1 = (c1 - c0 * c0.dot(&c1)).normalize();
        let c2 = c0.cross(&c1);
        Rotation(Matrix3::from_columns(&[c0, c1, c2]))
    }

    /// Hamilton unit quaternion `(x, y, z, w)`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_matrix(&self.0);
        [q.i, q.j, q.k, q.w]
    }

    /// Builds a rotation from a Hamilton quaternion `(x, y, z, w)`; the input
    /// is normalized first.
    pub fn from_quaternion(xyzw: [f64; 4]) -> Option<Self> {
        let q = Quaternion::new(xyzw[3], xyzw[0], xyzw[1], xyzw[2]);
        if !(q.norm() > 1e-12) {
            return None;
        }
        let q = UnitQuaternion::from_quaternion(q);
        Some(Rotation(q.to_rotation_matrix().into_inner()))
    }

    /// Geodesic distance to `other`, radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.transpose() * *other).angle()
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

/// Cross-product matrix `[w]×`.
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rigid transform `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SE3Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl SE3Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        SE3Pose { rotation, translation }
    }

    pub fn identity() -> Self {
        SE3Pose { rotation: Rotation::identity(), translation: Vector3::zeros() }
    }

    /// `self ∘ other`: rotation `Ra·Rb`, translation `Ra·tb + ta`.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let rt = self.rotation.transpose();
        SE3Pose { rotation: rt, translation: -rt.rotate(&self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// Applies the inverse transform without forming it.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix().tr_mul(&(p - self.translation))
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Reads the upper 3×4 block; the rotation block must be orthonormal
    /// within `tol`.
    pub fn from_homogeneous(m: &Matrix4<f64>, tol: f64) -> Option<SE3Pose> {
        let r = Rotation::from_matrix(m.fixed_view::<3, 3>(0, 0).into_owned(), tol)?;
        Some(SE3Pose { rotation: r, translation: m.fixed_view::<3, 1>(0, 3).into_owned() })
    }
}

impl Mul for SE3Pose {
    type Output = SE3Pose;

    fn mul(self, rhs: SE3Pose) -> SE3Pose {
        self.compose(&rhs)
    }
}

/// Six-parameter refinement: axis-angle rotation (radians) and translation
/// (meters), exponentiated independently.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TangentDelta {
    pub rot: Vector3<f64>,
    pub trans: Vector3<f64>,
}

impl TangentDelta {
    pub fn zero() -> Self {
        TangentDelta::default()
    }

    pub fn new(rot: Vector3<f64>, trans: Vector3<f64>) -> Self {
        TangentDelta { rot, trans }
    }

    /// `[rot.x, rot.y, rot.z, trans.x, trans.y, trans.z]`
    pub fn to_array(&self) -> [f64; 6] {
        [self.rot.x, self.rot.y, self.rot.z, self.trans.x, self.trans.y, self.trans.z]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        TangentDelta { rot: Vector3::new(a[0], a[1], a[2]), trans: Vector3::new(a[3], a[4], a[5]) }
    }

    pub fn is_zero(&self) -> bool {
        self.to_array().iter().all(|v| *v == 0.0)
    }
}

/// Pose of a delta: Rodrigues rotation, translation passed through.
pub fn exp_map(delta: &TangentDelta) -> SE3Pose {
    SE3Pose { rotation: Rotation::exp(&delta.rot), translation: delta.trans }
}

/// Right Jacobian of the rotation exponential:
/// `Exp(w + δ) ≈ Exp(w)·Exp(J_r(w)·δ)`.
pub fn so3_right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        return Matrix3::identity() - k * 0.5 + k2 * (1.0 / 6.0);
    }
    let t2 = theta * theta;
    Matrix3::identity() - k * ((1.0 - fmath::cos(theta)) / t2) + k2 * ((theta - fmath::sin(theta)) / (t2 * theta))
}

/// `pose ∘ exp(delta)`. A rotation-only delta leaves `pose.translation`
/// untouched (the rotation is about the pose's own origin).
pub fn apply_right_delta(pose: &SE3Pose, delta: &TangentDelta) -> SE3Pose {
    if delta.trans == Vector3::zeros() {
        // R·0 + t is t exactly, but skip the arithmetic so signed zeros and
        // rounding cannot leak in.
        return SE3Pose { rotation: pose.rotation * Rotation::exp(&delta.rot), translation: pose.translation };
    }
    pose.compose(&exp_map(delta))
}

/// `exp(delta) ∘ pose`. Rotates the pose about the world origin, so its
/// center moves by roughly `‖t‖·θ`.
pub fn apply_left_delta(pose: &SE3Pose, delta: &TangentDelta) -> SE3Pose {
    exp_map(delta).compose(pose)
}
