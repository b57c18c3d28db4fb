//! Whitened residual blocks and their analytic Jacobians.
//!
//! Every measurement contributes a 3-vector residual `r = Lᵀ e`, where `e`
//! is the raw model error and `L` is the lower-triangular Cholesky factor of
//! the measurement information (`L Lᵀ = Σ⁻¹`), so the total cost is the
//! plain sum of squares `Σ ‖r‖²`.
//!
//! Orientation variables use the left-multiplicative perturbation
//! `R ⊕ δ = Exp(δ) · R`; all other variables are additive. Jacobians are
//! therefore `∂r/∂δ` evaluated at `δ = 0`, which is what the Gauss–Newton
//! assembly consumes directly.
//!
//! Residual definitions (`R` the orientation at the sample, `g` gravity,
//! `m` the navigation-frame field, `D`/`o_*` the sensor parameters):
//!
//! ```text
//! accelerometer  e = s̃ + Rᵀ g − o_a
//! magnetometer   e = ỹ − D Rᵀ m(α) − o_m
//! gyroscope      e = ũ − Log(Rₖᵀ Rₖ₊₁)/Δt − o_ω
//! ```

use arrayvec::ArrayVec;
use nalgebra::{Matrix3, Rotation3, SMatrix, Vector3};

use crate::error::Result;
use crate::models::{CalibrationParams, ReferenceField, THETA_DIM};
use crate::so3;

/// Maximum number of variables any single residual touches.
pub const MAX_BLOCK_VARS: usize = 4;

/// Widest Jacobian column count (the distortion block, vec(D) ∈ ℝ⁹).
pub const MAX_VAR_DIM: usize = 9;

/// Offsets of the parameter groups inside the 19-dim θ vector.
pub const VAR_ACCEL_BIAS: VarId = VarId::Theta { offset: 0, dim: 3 };
pub const VAR_GYRO_BIAS: VarId = VarId::Theta { offset: 3, dim: 3 };
pub const VAR_DISTORTION: VarId = VarId::Theta { offset: 6, dim: 9 };
pub const VAR_MAG_BIAS: VarId = VarId::Theta { offset: 15, dim: 3 };
pub const VAR_DIP: VarId = VarId::Theta { offset: 18, dim: 1 };

/// Identifies the variable a Jacobian column-block differentiates against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarId {
    /// Orientation state `i` (3-dim tangent) — or, for problems with a
    /// different per-state dimension, state `i` of that dimension.
    State(usize),
    /// A slice of the shared parameter vector θ.
    Theta { offset: usize, dim: usize },
}

impl VarId {
    pub fn dim(&self, state_dim: usize) -> usize {
        match self {
            VarId::State(_) => state_dim,
            VarId::Theta { dim, .. } => *dim,
        }
    }
}

/// One Jacobian column-block `∂r/∂x_var`, stored zero-padded at fixed width.
#[derive(Clone, Debug)]
pub struct JacobianBlock {
    pub var: VarId,
    /// Only the first `var.dim()` columns are meaningful; the rest are zero.
    pub mat: SMatrix<f64, 3, MAX_VAR_DIM>,
}

impl JacobianBlock {
    pub fn new(var: VarId) -> Self {
        Self {
            var,
            mat: SMatrix::zeros(),
        }
    }

    pub fn from_matrix3(var: VarId, m: &Matrix3<f64>) -> Self {
        let mut b = Self::new(var);
        b.mat.fixed_view_mut::<3, 3>(0, 0).copy_from(m);
        b
    }

    pub fn from_column(var: VarId, c: &Vector3<f64>) -> Self {
        let mut b = Self::new(var);
        b.mat.set_column(0, c);
        b
    }
}

/// A whitened 3-vector residual with its Jacobian blocks.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub value: Vector3<f64>,
    pub jacobians: ArrayVec<JacobianBlock, MAX_BLOCK_VARS>,
}

impl ResidualBlock {
    pub fn cost(&self) -> f64 {
        self.value.norm_squared()
    }

    /// True when the value and every Jacobian entry are finite. The
    /// assembly refuses non-finite blocks — they signal divergence or bad
    /// input, not a recoverable step.
    pub fn is_finite(&self) -> bool {
        self.value.iter().all(|x| x.is_finite())
            && self
                .jacobians
                .iter()
                .all(|j| j.mat.iter().all(|x| x.is_finite()))
    }
}

/// Whitening factors: lower-triangular `L` with `L Lᵀ = Σ⁻¹`. For the
/// isotropic covariances used here, `L = I/σ`.
#[derive(Clone, Copy, Debug)]
pub struct Whitening {
    pub accel: f64,
    pub gyro: f64,
    pub mag: f64,
}

impl Whitening {
    pub fn from_sigmas(sigma_accel: f64, sigma_gyro: f64, sigma_mag: f64) -> Self {
        Self {
            accel: 1.0 / sigma_accel,
            gyro: 1.0 / sigma_gyro,
            mag: 1.0 / sigma_mag,
        }
    }
}

/// Accelerometer residual at orientation state `state_idx`.
///
/// `r = L_aᵀ (s̃ + Rᵀ g − o_a)` with Jacobians
/// `∂r/∂δR = L_aᵀ [Rᵀ g]ₓ Rᵀ` and `∂r/∂o_a = −L_aᵀ`.
pub fn accel_residual(
    meas: &Vector3<f64>,
    r: &Rotation3<f64>,
    state_idx: usize,
    params: &CalibrationParams,
    field: &ReferenceField,
    w: &Whitening,
) -> ResidualBlock {
    let g_body = r.inverse() * field.gravity_nav();
    let e = meas + g_body - params.accel_bias;
    let l = w.accel;

    let j_rot = (so3::hat(&g_body) * r.matrix().transpose()) * l;
    let j_bias = Matrix3::from_diagonal_element(-l);

    let mut jacobians = ArrayVec::new();
    jacobians.push(JacobianBlock::from_matrix3(VarId::State(state_idx), &j_rot));
    jacobians.push(JacobianBlock::from_matrix3(VAR_ACCEL_BIAS, &j_bias));
    ResidualBlock {
        value: e * l,
        jacobians,
    }
}

/// Magnetometer residual at orientation state `state_idx`.
///
/// `r = L_mᵀ (ỹ − D Rᵀ m(α) − o_m)` with Jacobians
/// `∂r/∂δR = −L_mᵀ D [Rᵀ m]ₓ Rᵀ`, `∂r/∂vec(D)` column-block `j` equal to
/// `−(Rᵀm)_j L_mᵀ`, `∂r/∂o_m = −L_mᵀ`, and
/// `∂r/∂α = L_mᵀ D Rᵀ (0, sin α, cos α)ᵀ`.
pub fn mag_residual(
    meas: &Vector3<f64>,
    r: &Rotation3<f64>,
    state_idx: usize,
    params: &CalibrationParams,
    field: &ReferenceField,
    w: &Whitening,
) -> ResidualBlock {
    let m_body = r.inverse() * field.mag_nav(params.dip_angle);
    let e = meas - params.distortion * m_body - params.mag_bias;
    let l = w.mag;

    let j_rot = -(params.distortion * so3::hat(&m_body) * r.matrix().transpose()) * l;

    let mut j_dist = JacobianBlock::new(VAR_DISTORTION);
    for j in 0..3 {
        let coeff = -m_body[j] * l;
        for rrow in 0..3 {
            j_dist.mat[(rrow, 3 * j + rrow)] = coeff;
        }
    }

    let dm_dalpha = Vector3::new(0.0, params.dip_angle.sin(), params.dip_angle.cos());
    let j_dip = (params.distortion * (r.inverse() * dm_dalpha)) * l;

    let j_bias = Matrix3::from_diagonal_element(-l);

    let mut jacobians = ArrayVec::new();
    jacobians.push(JacobianBlock::from_matrix3(VarId::State(state_idx), &j_rot));
    jacobians.push(j_dist);
    jacobians.push(JacobianBlock::from_matrix3(VAR_MAG_BIAS, &j_bias));
    jacobians.push(JacobianBlock::from_column(VAR_DIP, &j_dip));
    ResidualBlock {
        value: e * l,
        jacobians,
    }
}

/// Gyroscope transition residual between consecutive orientation states.
///
/// With `φ = Log(Rₖᵀ Rₖ₊₁)`:
/// `r = L_ωᵀ (ũ − φ/Δt − o_ω)`,
/// `∂r/∂δRₖ = (1/Δt) L_ωᵀ J_r⁻¹(φ) Rₖ₊₁ᵀ`, `∂r/∂δRₖ₊₁ = −∂r/∂δRₖ`,
/// `∂r/∂o_ω = −L_ωᵀ`.
///
/// Fails if the step rotation reaches the injectivity radius π.
pub fn gyro_residual(
    meas: &Vector3<f64>,
    r_k: &Rotation3<f64>,
    r_next: &Rotation3<f64>,
    state_idx: usize,
    params: &CalibrationParams,
    dt: f64,
    w: &Whitening,
) -> Result<ResidualBlock> {
    let phi = so3::log_map(&(r_k.inverse() * r_next));
    let e = meas - phi / dt - params.gyro_bias;
    let l = w.gyro;

    let jr_inv = so3::right_jacobian_inv(&phi)?;
    let j_k = (jr_inv * r_next.matrix().transpose()) * (l / dt);
    let j_bias = Matrix3::from_diagonal_element(-l);

    let mut jacobians = ArrayVec::new();
    jacobians.push(JacobianBlock::from_matrix3(VarId::State(state_idx), &j_k));
    jacobians.push(JacobianBlock::from_matrix3(
        VarId::State(state_idx + 1),
        &(-j_k),
    ));
    jacobians.push(JacobianBlock::from_matrix3(VAR_GYRO_BIAS, &j_bias));
    Ok(ResidualBlock {
        value: e * l,
        jacobians,
    })
}

/// Numerically differentiate a residual with respect to one variable by
/// central differences on the same perturbation convention the analytic
/// Jacobians use. Test/diagnostic helper.
///
/// `eval(delta)` must re-evaluate the residual with the chosen variable
/// perturbed by `delta` (length = variable dimension).
pub fn finite_difference_jacobian<F>(dim: usize, h: f64, mut eval: F) -> SMatrix<f64, 3, MAX_VAR_DIM>
where
    F: FnMut(&[f64]) -> Vector3<f64>,
{
    let mut out = SMatrix::<f64, 3, MAX_VAR_DIM>::zeros();
    let mut delta = vec![0.0; dim];
    for j in 0..dim {
        delta[j] = h;
        let plus = eval(&delta);
        delta[j] = -h;
        let minus = eval(&delta);
        delta[j] = 0.0;
        out.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    out
}

/// Apply a θ-perturbation restricted to one parameter group, for
/// finite-difference checks against the analytic blocks.
pub fn perturb_theta(params: &CalibrationParams, var: VarId, delta: &[f64]) -> CalibrationParams {
    let VarId::Theta { offset, dim } = var else {
        panic!("perturb_theta expects a Theta variable");
    };
    assert_eq!(delta.len(), dim);
    let mut step = [0.0; THETA_DIM];
    step[offset..offset + dim].copy_from_slice(delta);
    params.retract(&step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;
    use approx::assert_relative_eq;
    use rand::{Rng, RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    const FD_H: f64 = 1e-6;
    const FD_TOL: f64 = 1e-6;

    fn test_setup() -> (CalibrationParams, ReferenceField, Whitening, ChaCha12Rng) {
        let mut params = CalibrationParams::default();
        params.accel_bias = Vector3::new(0.2, -0.3, 0.1);
        params.gyro_bias = Vector3::new(0.008, -0.005, 0.003);
        #[rustfmt::skip]
        let d = Matrix3::new(
            1.05, 0.02, -0.04,
            0.10, 0.95,  0.01,
            -0.07, 0.06, 1.02,
        );
        params.distortion = d;
        params.mag_bias = Vector3::new(1.5, -0.8, 0.4);
        params.dip_angle = 1.22;
        let field = ReferenceField::default();
        let w = Whitening::from_sigmas(0.18, 7.8e-3, 0.027);
        (params, field, w, ChaCha12Rng::seed_from_u64(7))
    }

    fn random_rotation(rng: &mut impl Rng) -> Rotation3<f64> {
        so3::exp_map(&Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ))
    }

    fn check_block(
        analytic: &SMatrix<f64, 3, MAX_VAR_DIM>,
        numeric: &SMatrix<f64, 3, MAX_VAR_DIM>,
        label: &str,
    ) {
        let scale = analytic.norm().max(1.0);
        let err = (analytic - numeric).norm() / scale;
        assert!(err < FD_TOL, "{label}: relative FD mismatch {err:.3e}");
    }

    #[test]
    fn accel_residual_zero_at_exact_model() {
        let (params, field, w, mut rng) = test_setup();
        let r = random_rotation(&mut rng);
        let meas = models::accel_model(&r, &params, &field);
        let block = accel_residual(&meas, &r, 0, &params, &field, &w);
        assert!(block.value.norm() < 1e-12);
        assert_eq!(block.jacobians.len(), 2);
    }

    #[test]
    fn accel_jacobians_match_finite_differences() {
        let (params, field, w, mut rng) = test_setup();
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let meas = models::accel_model(&r, &params, &field)
                + Vector3::new(0.05, -0.02, 0.03);
            let block = accel_residual(&meas, &r, 0, &params, &field, &w);

            let fd_rot = finite_difference_jacobian(3, FD_H, |d| {
                let rp = so3::exp_map(&Vector3::new(d[0], d[1], d[2])) * r;
                accel_residual(&meas, &rp, 0, &params, &field, &w).value
            });
            check_block(&block.jacobians[0].mat, &fd_rot, "accel/orientation");

            let fd_bias = finite_difference_jacobian(3, FD_H, |d| {
                let p = perturb_theta(&params, VAR_ACCEL_BIAS, d);
                accel_residual(&meas, &r, 0, &p, &field, &w).value
            });
            check_block(&block.jacobians[1].mat, &fd_bias, "accel/bias");
        }
    }

    #[test]
    fn mag_residual_zero_at_exact_model() {
        let (params, field, w, mut rng) = test_setup();
        let r = random_rotation(&mut rng);
        let meas = models::mag_model(&r, &params, &field);
        let block = mag_residual(&meas, &r, 0, &params, &field, &w);
        assert!(block.value.norm() < 1e-12);
        assert_eq!(block.jacobians.len(), 4);
    }

    #[test]
    fn mag_jacobians_match_finite_differences() {
        let (params, field, w, mut rng) = test_setup();
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let meas = models::mag_model(&r, &params, &field)
                + Vector3::new(0.02, 0.01, -0.015);
            let block = mag_residual(&meas, &r, 0, &params, &field, &w);

            let fd_rot = finite_difference_jacobian(3, FD_H, |d| {
                let rp = so3::exp_map(&Vector3::new(d[0], d[1], d[2])) * r;
                mag_residual(&meas, &rp, 0, &params, &field, &w).value
            });
            check_block(&block.jacobians[0].mat, &fd_rot, "mag/orientation");

            let fd_dist = finite_difference_jacobian(9, FD_H, |d| {
                let p = perturb_theta(&params, VAR_DISTORTION, d);
                mag_residual(&meas, &r, 0, &p, &field, &w).value
            });
            check_block(&block.jacobians[1].mat, &fd_dist, "mag/distortion");

            let fd_bias = finite_difference_jacobian(3, FD_H, |d| {
                let p = perturb_theta(&params, VAR_MAG_BIAS, d);
                mag_residual(&meas, &r, 0, &p, &field, &w).value
            });
            check_block(&block.jacobians[2].mat, &fd_bias, "mag/bias");

            let fd_dip = finite_difference_jacobian(1, FD_H, |d| {
                let p = perturb_theta(&params, VAR_DIP, d);
                mag_residual(&meas, &r, 0, &p, &field, &w).value
            });
            check_block(&block.jacobians[3].mat, &fd_dip, "mag/dip");
        }
    }

    #[test]
    fn gyro_residual_zero_at_exact_model() {
        let (params, field, w, mut rng) = test_setup();
        let _ = field;
        let dt = 0.0125;
        let r = random_rotation(&mut rng);
        let meas = Vector3::new(0.5, -0.3, 0.2);
        let r_next = models::propagate(&r, &meas, &params.gyro_bias, dt);
        let block = gyro_residual(&meas, &r, &r_next, 0, &params, dt, &w).unwrap();
        assert!(block.value.norm() < 1e-12);
        assert_eq!(block.jacobians.len(), 3);
    }

    #[test]
    fn gyro_jacobians_match_finite_differences() {
        let (params, field, w, mut rng) = test_setup();
        let _ = field;
        let dt = 0.0125;
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let meas = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            // displace the successor so the residual is non-zero
            let r_next = models::propagate(&r, &meas, &params.gyro_bias, dt)
                * so3::exp_map(&Vector3::new(0.01, -0.02, 0.015));
            let block = gyro_residual(&meas, &r, &r_next, 3, &params, dt, &w).unwrap();

            assert_eq!(block.jacobians[0].var, VarId::State(3));
            assert_eq!(block.jacobians[1].var, VarId::State(4));

            let fd_k = finite_difference_jacobian(3, FD_H, |d| {
                let rp = so3::exp_map(&Vector3::new(d[0], d[1], d[2])) * r;
                gyro_residual(&meas, &rp, &r_next, 3, &params, dt, &w)
                    .unwrap()
                    .value
            });
            check_block(&block.jacobians[0].mat, &fd_k, "gyro/state k");

            let fd_k1 = finite_difference_jacobian(3, FD_H, |d| {
                let rp = so3::exp_map(&Vector3::new(d[0], d[1], d[2])) * r_next;
                gyro_residual(&meas, &r, &rp, 3, &params, dt, &w)
                    .unwrap()
                    .value
            });
            check_block(&block.jacobians[1].mat, &fd_k1, "gyro/state k+1");

            let fd_bias = finite_difference_jacobian(3, FD_H, |d| {
                let p = perturb_theta(&params, VAR_GYRO_BIAS, d);
                gyro_residual(&meas, &r, &r_next, 3, &p, dt, &w).unwrap().value
            });
            check_block(&block.jacobians[2].mat, &fd_bias, "gyro/bias");
        }
    }

    #[test]
    fn gyro_residual_rejects_half_turn_steps() {
        let (params, _, w, _) = test_setup();
        let r = Rotation3::identity();
        let r_next = so3::exp_map(&Vector3::new(std::f64::consts::PI, 0.0, 0.0));
        assert!(gyro_residual(&Vector3::zeros(), &r, &r_next, 0, &params, 0.0125, &w).is_err());
    }

    #[test]
    fn whitening_scales_residuals_and_cost() {
        let (params, field, w, mut rng) = test_setup();
        let r = random_rotation(&mut rng);
        let meas = models::accel_model(&r, &params, &field) + Vector3::new(0.1, 0.0, 0.0);
        let block = accel_residual(&meas, &r, 0, &params, &field, &w);
        // e = (0.1, 0, 0) whitened by 1/σ_a
        assert_relative_eq!(block.value.x, 0.1 * w.accel, epsilon = 1e-12);
        assert_relative_eq!(block.cost(), (0.1 * w.accel).powi(2), epsilon = 1e-9);
    }
}
