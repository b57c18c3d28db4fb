//! SO(3) primitives: hat map, exponential, logarithm, and the right Jacobian
//! pair that every analytic derivative in this crate is built from.
//!
//! Conventions used throughout the crate:
//!
//! - rotations map body coordinates to navigation coordinates, so `r.transpose() * v_nav`
//!   expresses a navigation-frame vector in the body frame;
//! - rotation perturbations are left-multiplicative, `R ⊕ δ = Exp(δ) · R`;
//! - tangent vectors are axis-angle, in radians, with the canonical logarithm
//!   satisfying `‖Log(R)‖ ≤ π`.
//!
//! Closed-form trigonometric coefficients lose precision for small angles, so
//! every operation switches to a truncated Taylor series below
//! [`SMALL_ANGLE`]. The logarithm additionally switches to an axis extraction
//! from the symmetric part of the matrix near π, where the antisymmetric part
//! vanishes.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};

/// Below this angle (rad) series expansions replace the closed forms.
pub const SMALL_ANGLE: f64 = 1e-5;

/// Above this angle (rad) the logarithm extracts the axis from the symmetric
/// part of the rotation matrix; `sin θ` is too small for the usual formula.
const NEAR_PI: f64 = 3.0;

/// Skew-symmetric (cross-product) matrix of `v`: `hat(v) * w == v.cross(&w)`.
#[rustfmt::skip]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0,  -v.z,  v.y,
        v.z,   0.0, -v.x,
       -v.y,   v.x,  0.0,
    )
}

/// Inverse of [`hat`] on skew-symmetric matrices.
pub(crate) fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Exponential map: axis-angle vector to rotation matrix (Rodrigues formula).
pub fn exp_map(v: &Vector3<f64>) -> Rotation3<f64> {
    let theta = v.norm();
    let vx = hat(v);
    // sin θ / θ and (1 − cos θ) / θ² with series fallbacks
    let (a, b) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / (theta * theta),
        )
    };
    Rotation3::from_matrix_unchecked(Matrix3::identity() + a * vx + b * (vx * vx))
}

/// Logarithm map: rotation matrix to the canonical axis-angle vector with
/// `‖v‖ ≤ π`. At exactly π the axis sign is ambiguous; the component of the
/// axis with the largest magnitude is made positive so the result is
/// deterministic.
pub fn log_map(r: &Rotation3<f64>) -> Vector3<f64> {
    let m = r.matrix();
    // vee(R − Rᵀ) = 2 sin θ · axis
    let w = 2.0 * vee(&((m - m.transpose()) * 0.5));
    let sin_theta = 0.5 * w.norm();
    let cos_theta = (0.5 * (m.trace() - 1.0)).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < SMALL_ANGLE {
        // θ / (2 sin θ) ≈ ½ (1 + θ²/6)
        return 0.5 * (1.0 + theta * theta / 6.0) * w;
    }
    if theta < NEAR_PI {
        return (theta / (2.0 * sin_theta)) * w;
    }

    // Near π: R + Rᵀ = 2 (cos θ I + (1 − cos θ) a aᵀ). Extract the axis from
    // the best-conditioned column of a aᵀ.
    let sym = (m + m.transpose()) * 0.5 - Matrix3::from_diagonal_element(cos_theta);
    let aat = sym / (1.0 - cos_theta);
    let i = (0..3)
        .max_by(|&a, &b| aat[(a, a)].partial_cmp(&aat[(b, b)]).unwrap())
        .unwrap();
    let mut axis = Vector3::new(aat[(0, i)], aat[(1, i)], aat[(2, i)]) / aat[(i, i)].sqrt();
    axis.normalize_mut();

    // Resolve the sign from the antisymmetric part while it carries signal;
    // at exactly π pick the deterministic canonical representative.
    let dot = axis.dot(&w);
    if dot < 0.0 {
        axis = -axis;
    } else if dot == 0.0 {
        let j = (0..3)
            .max_by(|&a, &b| axis[a].abs().partial_cmp(&axis[b].abs()).unwrap())
            .unwrap();
        if axis[j] < 0.0 {
            axis = -axis;
        }
    }
    theta * axis
}

/// Right Jacobian of the exponential map:
///
/// ```text
/// J_r(v) = I − (1 − cos‖v‖)/‖v‖² [v]ₓ + (‖v‖ − sin‖v‖)/‖v‖³ [v]ₓ²
/// ```
///
/// relating a perturbation of the tangent vector to a right-multiplicative
/// perturbation of the rotation: `Exp(v + δ) ≈ Exp(v) Exp(J_r(v) δ)`.
pub fn right_jacobian(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = v.norm();
    let vx = hat(v);
    let (c1, c2) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        (
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    };
    Matrix3::identity() - c1 * vx + c2 * (vx * vx)
}

/// Closed-form inverse of [`right_jacobian`]:
///
/// ```text
/// J_r⁻¹(v) = I + ½ [v]ₓ + (1/‖v‖² − (1 + cos‖v‖)/(2‖v‖ sin‖v‖)) [v]ₓ²
/// ```
///
/// Rejects `‖v‖ ≥ π`: the residuals that need this matrix are only defined
/// within the injectivity radius of the logarithm.
pub fn right_jacobian_inv(v: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let theta = v.norm();
    if theta >= std::f64::consts::PI {
        return Err(Error::RotationOutOfRange { angle: theta });
    }
    let vx = hat(v);
    let c = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0
    } else {
        let t2 = theta * theta;
        1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Ok(Matrix3::identity() + 0.5 * vx + c * (vx * vx))
}

/// One Newton iteration of the polar decomposition,
/// `R ← R (3I − RᵀR) / 2`, pulling a drifted product back onto SO(3).
///
/// Long multiplicative chains (dead reckoning, preintegration) apply this
/// every [`ORTHONORMALIZE_EVERY`] products.
pub fn orthonormalize(r: &Rotation3<f64>) -> Rotation3<f64> {
    let m = r.matrix();
    let corrected = m * (Matrix3::from_diagonal_element(3.0) - m.transpose() * m) * 0.5;
    Rotation3::from_matrix_unchecked(corrected)
}

/// Re-orthonormalization cadence for multiplicative chains.
pub const ORTHONORMALIZE_EVERY: usize = 100;
