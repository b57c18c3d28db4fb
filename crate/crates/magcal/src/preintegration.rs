//! Gyroscope preintegration between magnetometer keyframes.
//!
//! When the magnetometer runs at 1/N of the IMU rate, the N gyroscope
//! samples between consecutive keyframes are compressed into a single
//! relative-rotation constraint so the estimator only carries keyframe
//! orientations:
//!
//! ```text
//! ΔR̄   = Π_{i} Exp((ũᵢ − ō) Δt)          integrated at a nominal bias ō
//! ΔR̃(b) = ΔR̄ · Exp(B (b − ō))            first-order bias correction
//! r     = L Log(ΔR̃ᵀ Rₖᵀ Rₖ₊ₙ)            whitened residual
//! ```
//!
//! The bias Jacobian accumulates as
//! `B ← Exp((ũᵢ − ō)Δt)ᵀ B − J_r((ũᵢ − ō)Δt) Δt` from `B = 0`, so a bias
//! change never forces re-integration inside an optimizer iteration.
//!
//! The whitening uses the isotropic approximation `Σ ≈ N σ_ω² Δt² I`;
//! [`exact_covariance`] provides the exact propagated covariance for
//! validating that approximation.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::Result;
use crate::parallel;
use crate::residuals::{JacobianBlock, ResidualBlock, VarId, VAR_GYRO_BIAS};
use crate::so3;

/// A compressed block of gyroscope samples between two keyframes.
#[derive(Clone, Debug)]
pub struct Preintegrated {
    /// Relative rotation integrated at the nominal bias.
    pub delta_r: Rotation3<f64>,
    /// First-order sensitivity of `Log(ΔR)` to a gyro-bias change.
    pub bias_jacobian: Matrix3<f64>,
    /// Bias the block was integrated at.
    pub nominal_bias: Vector3<f64>,
    /// Sample spacing (s).
    pub dt: f64,
    /// Number of gyroscope samples folded into this block.
    pub count: usize,
}

impl Preintegrated {
    /// Relative rotation corrected to an updated absolute bias estimate.
    pub fn corrected(&self, gyro_bias: &Vector3<f64>) -> Rotation3<f64> {
        let delta = gyro_bias - self.nominal_bias;
        self.delta_r * so3::exp_map(&(self.bias_jacobian * delta))
    }

    /// Whitening scale for the isotropic covariance approximation:
    /// `1 / (σ_ω Δt √N)`.
    pub fn whitening_scale(&self, sigma_gyro: f64) -> f64 {
        1.0 / (sigma_gyro * self.dt * (self.count as f64).sqrt())
    }

    /// The isotropic covariance approximation `N σ_ω² Δt² I`.
    pub fn approx_covariance(&self, sigma_gyro: f64) -> Matrix3<f64> {
        Matrix3::from_diagonal_element(
            self.count as f64 * sigma_gyro * sigma_gyro * self.dt * self.dt,
        )
    }
}

/// Integrate one span of gyroscope samples at the given nominal bias.
pub fn preintegrate(
    gyro: &[Vector3<f64>],
    nominal_bias: &Vector3<f64>,
    dt: f64,
) -> Preintegrated {
    let mut delta_r = Rotation3::identity();
    let mut b = Matrix3::zeros();
    for (i, u) in gyro.iter().enumerate() {
        let v = (u - nominal_bias) * dt;
        let step = so3::exp_map(&v);
        b = step.matrix().transpose() * b - so3::right_jacobian(&v) * dt;
        delta_r *= step;
        if (i + 1) % so3::ORTHONORMALIZE_EVERY == 0 {
            delta_r = so3::orthonormalize(&delta_r);
        }
    }
    Preintegrated {
        delta_r,
        bias_jacobian: b,
        nominal_bias: *nominal_bias,
        dt,
        count: gyro.len(),
    }
}

/// Preintegrate every keyframe-to-keyframe span of a full-rate gyro stream.
///
/// With T samples and rate ratio N there are `ceil(T/N) − 1` spans; span `l`
/// consumes `gyro[lN .. (l+1)N]`. Spans are independent and run in parallel
/// when the `parallel` feature is active; the output order is by span index
/// either way.
pub fn preintegrate_spans(
    gyro: &[Vector3<f64>],
    rate_ratio: usize,
    nominal_bias: &Vector3<f64>,
    dt: f64,
) -> Vec<Preintegrated> {
    let spans = num_spans(gyro.len(), rate_ratio);
    parallel::map_indexed(spans, |l| {
        preintegrate(
            &gyro[l * rate_ratio..(l + 1) * rate_ratio],
            nominal_bias,
            dt,
        )
    })
}

/// Sequential reference implementation of [`preintegrate_spans`], kept as a
/// benchmark baseline and determinism check.
pub fn preintegrate_spans_seq(
    gyro: &[Vector3<f64>],
    rate_ratio: usize,
    nominal_bias: &Vector3<f64>,
    dt: f64,
) -> Vec<Preintegrated> {
    let spans = num_spans(gyro.len(), rate_ratio);
    parallel::map_indexed_seq(spans, |l| {
        preintegrate(
            &gyro[l * rate_ratio..(l + 1) * rate_ratio],
            nominal_bias,
            dt,
        )
    })
}

fn num_spans(samples: usize, rate_ratio: usize) -> usize {
    samples.div_ceil(rate_ratio.max(1)).saturating_sub(1)
}

/// Exact covariance of the preintegrated rotation error under per-sample
/// gyro noise `σ²I`, propagated through the integration chain:
///
/// ```text
/// Σ = Σ_k A_k (σ² I) A_kᵀ,   A_k = (Π_{i>k} Exp(vᵢ))ᵀ J_r(v_k) Δt
/// ```
///
/// with `v_i = (ũᵢ − ō) Δt`. The reference for judging the isotropic
/// approximation used in the estimator weights.
pub fn exact_covariance(
    gyro: &[Vector3<f64>],
    nominal_bias: &Vector3<f64>,
    dt: f64,
    sigma_gyro: f64,
) -> Matrix3<f64> {
    let n = gyro.len();
    // suffix[k] = Exp(v_{k+1})·…·Exp(v_{n−1}), built back-to-front
    let mut suffix = vec![Rotation3::identity(); n];
    for k in (0..n.saturating_sub(1)).rev() {
        let v = (gyro[k + 1] - nominal_bias) * dt;
        suffix[k] = so3::exp_map(&v) * suffix[k + 1];
    }
    let mut cov = Matrix3::zeros();
    for k in 0..n {
        let v = (gyro[k] - nominal_bias) * dt;
        let a = suffix[k].matrix().transpose() * so3::right_jacobian(&v) * dt;
        cov += a * a.transpose();
    }
    cov * (sigma_gyro * sigma_gyro)
}

/// Preintegrated relative-rotation residual between keyframe states
/// `state_idx` and `state_idx + 1`.
///
/// With `Q = ΔR̃(b)ᵀ Rₖᵀ Rₖ₊ₙ`, `ψ = Log(Q)`, and whitening scale `l`:
///
/// ```text
/// r          = l ψ
/// ∂r/∂δRₖ    = −l J_r⁻¹(ψ) Rₖ₊ₙᵀ
/// ∂r/∂δRₖ₊ₙ  = +l J_r⁻¹(ψ) Rₖ₊ₙᵀ
/// ∂r/∂o_ω    = −l J_r⁻¹(ψ) Qᵀ J_r(B Δo) B,   Δo = o_ω − ō
/// ```
pub fn preint_residual(
    pre: &Preintegrated,
    r_k: &Rotation3<f64>,
    r_next: &Rotation3<f64>,
    state_idx: usize,
    gyro_bias: &Vector3<f64>,
    sigma_gyro: f64,
) -> Result<ResidualBlock> {
    let delta = gyro_bias - pre.nominal_bias;
    let correction = pre.bias_jacobian * delta;
    let q = pre.corrected(gyro_bias).inverse() * r_k.inverse() * r_next;
    let psi = so3::log_map(&q);
    let l = pre.whitening_scale(sigma_gyro);

    let jr_inv = so3::right_jacobian_inv(&psi)?;
    let j_next = (jr_inv * r_next.matrix().transpose()) * l;
    let j_bias =
        -(jr_inv * q.matrix().transpose() * so3::right_jacobian(&correction) * pre.bias_jacobian)
            * l;

    let mut jacobians = arrayvec::ArrayVec::new();
    jacobians.push(JacobianBlock::from_matrix3(
        VarId::State(state_idx),
        &(-j_next),
    ));
    jacobians.push(JacobianBlock::from_matrix3(
        VarId::State(state_idx + 1),
        &j_next,
    ));
    jacobians.push(JacobianBlock::from_matrix3(VAR_GYRO_BIAS, &j_bias));
    Ok(ResidualBlock {
        value: psi * l,
        jacobians,
    })
}
