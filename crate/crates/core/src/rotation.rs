//! Axis-angle rotation algebra.
//!
//! Rotations are stored as axis-angle 3-vectors (unit axis scaled by the
//! angle in radians). The exponential map is expanded to second order near
//! zero, and the logarithm recovers the axis from the symmetric part of the
//! matrix when the angle is close to a half turn.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Angles below this use the series expansion of the exponential map.
const SMALL_ANGLE: f64 = 1e-8;

/// Tolerance on `‖RᵀR − I‖_F` accepted by [`rodrigues_inverse`].
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// Skew-symmetric cross-product matrix, `hat(a) * b == a × b`.
#[inline]
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] applied to the antisymmetric part of `m`.
#[inline]
fn vee_antisym(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

/// Exponential map: axis-angle to rotation matrix.
pub fn rodrigues(axis_angle: &Vec3) -> Mat3 {
    let theta_sq = axis_angle.norm_squared();
    let k = hat(axis_angle);
    if theta_sq < SMALL_ANGLE * SMALL_ANGLE {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let theta = theta_sq.sqrt();
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta_sq;
    Mat3::identity() + a * k + b * k * k
}

/// Logarithm map: rotation matrix to axis-angle with angle in `[0, π]`.
///
/// At exactly π the axis sign is arbitrary.
pub fn rodrigues_inverse(rot: &Mat3) -> Result<Vec3> {
    let orthogonality_error = (rot.transpose() * rot - Mat3::identity()).norm();
    let determinant = rot.determinant();
    if !orthogonality_error.is_finite()
        || orthogonality_error > ORTHONORMAL_TOL
        || (determinant - 1.0).abs() > ORTHONORMAL_TOL
    {
        return Err(Error::NotARotation {
            orthogonality_error,
            determinant,
        });
    }

    let v = vee_antisym(rot);
    let sin_theta = 0.5 * v.norm();
    let cos_theta = 0.5 * (rot.trace() - 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if cos_theta >= 0.0 {
        if sin_theta < 1e-12 {
            // first order: R − Rᵀ ≈ 2·hat(ω)
            return Ok(0.5 * v);
        }
        return Ok(v * (theta / (2.0 * sin_theta)));
    }

    // Near a half turn: (R + Rᵀ)/2 − cosθ·I = (1 − cosθ)·a·aᵀ.
    let one_minus_cos = 1.0 - cos_theta;
    let sym = 0.5 * (rot + rot.transpose()) - cos_theta * Mat3::identity();
    let pivot = (0..3)
        .max_by(|&i, &j| sym[(i, i)].total_cmp(&sym[(j, j)]))
        .unwrap();
    let a_pivot = (sym[(pivot, pivot)] / one_minus_cos).max(0.0).sqrt();
    let mut axis = Vec3::zeros();
    for i in 0..3 {
        axis[i] = if i == pivot {
            a_pivot
        } else {
            sym[(i, pivot)] / (one_minus_cos * a_pivot)
        };
    }
    axis.normalize_mut();
    if axis.dot(&v) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Left Jacobian of the exponential map.
///
/// `rodrigues(ω + δ) ≈ rodrigues(J_l(ω)·δ) · rodrigues(ω)` to first order.
pub fn left_jacobian(axis_angle: &Vec3) -> Mat3 {
    let theta_sq = axis_angle.norm_squared();
    let k = hat(axis_angle);
    let (a, b) = if theta_sq < 1e-10 {
        (0.5 - theta_sq / 24.0, 1.0 / 6.0 - theta_sq / 120.0)
    } else {
        let theta = theta_sq.sqrt();
        (
            (1.0 - theta.cos()) / theta_sq,
            (theta - theta.sin()) / (theta_sq * theta),
        )
    };
    Mat3::identity() + a * k + b * k * k
}

/// Reflection of an axis-angle rotation across the `x = 0` plane.
///
/// Equivalent to conjugating the rotation matrix by `diag(−1, 1, 1)`.
#[inline]
pub fn mirror(axis_angle: &Vec3) -> Vec3 {
    Vec3::new(axis_angle.x, -axis_angle.y, -axis_angle.z)
}

/// Wraps an axis-angle vector so its angle lies in `[0, π]`.
pub fn canonicalize(axis_angle: &Vec3) -> Vec3 {
    let theta = axis_angle.norm();
    if theta <= std::f64::consts::PI {
        return *axis_angle;
    }
    let two_pi = std::f64::consts::TAU;
    let wrapped = theta.rem_euclid(two_pi);
    let axis = axis_angle / theta;
    if wrapped > std::f64::consts::PI {
        -axis * (two_pi - wrapped)
    } else {
        axis * wrapped
    }
}
