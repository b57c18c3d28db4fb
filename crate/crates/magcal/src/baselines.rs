//! Reference estimators the joint solver is benchmarked against.
//!
//! * [`wu_ekf`] — an error-state extended Kalman filter whose state stacks
//!   the orientation with all 19 calibration parameters (22-dim error).
//!   One forward pass, stacked accelerometer+magnetometer updates at
//!   keyframes.
//! * [`kok_ml`] — maximum-likelihood calibration: the orientation
//!   trajectory is marginalized by a 3-state EKF, giving a marginal
//!   negative log-likelihood of the parameters that a quasi-Newton
//!   optimizer minimizes with central-difference gradients.
//!
//! Both reuse the measurement models of [`crate::residuals`] with unit
//! whitening: an innovation is exactly an unwhitened residual, and the
//! measurement Jacobian is the negated residual Jacobian.

use nalgebra::{Rotation3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::InitBundle;
use crate::models::{CalibrationParams, Dataset, NoiseConfig, ReferenceField, THETA_DIM};
use crate::parallel;
use crate::residuals::{accel_residual, mag_residual, ResidualBlock, VarId, Whitening};
use crate::so3;

/// Filter error-state dimension: 3 orientation + 19 parameters.
pub const ERROR_DIM: usize = 3 + THETA_DIM;

const UNIT_WHITENING: Whitening = Whitening {
    accel: 1.0,
    gyro: 1.0,
    mag: 1.0,
};

/// Prior standard deviations for the filter's initial covariance. The
/// defaults cover the full spread of the benchmark's parameter ranges
/// (a uniform width-`w` prior has standard deviation `w/√12`).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EkfPriors {
    /// Initial orientation uncertainty (rad).
    pub sigma_rotation: f64,
    /// Accelerometer bias (m/s²).
    pub sigma_accel_bias: f64,
    /// Gyro bias (rad/s).
    pub sigma_gyro_bias: f64,
    /// Diagonal distortion entries.
    pub sigma_scale: f64,
    /// Off-diagonal distortion entries.
    pub sigma_cross: f64,
    /// Magnetometer bias (µT).
    pub sigma_mag_bias: f64,
    /// Dip angle (rad).
    pub sigma_dip: f64,
}

impl Default for EkfPriors {
    fn default() -> Self {
        let u = 1.0 / 12.0_f64.sqrt();
        Self {
            sigma_rotation: 5.0_f64.to_radians(),
            sigma_accel_bias: 1.0 * u,
            sigma_gyro_bias: 0.2_f64.to_radians() * u,
            sigma_scale: 0.2 * u,
            sigma_cross: 0.5 * u,
            sigma_mag_bias: 4.0 * u,
            sigma_dip: 5.0_f64.to_radians(),
        }
    }
}

impl EkfPriors {
    /// Diagonal initial covariance in the error-state layout.
    pub fn initial_covariance(&self) -> SMatrix<f64, ERROR_DIM, ERROR_DIM> {
        let mut d = SVector::<f64, ERROR_DIM>::zeros();
        for i in 0..3 {
            d[i] = self.sigma_rotation;
            d[3 + i] = self.sigma_accel_bias;
            d[6 + i] = self.sigma_gyro_bias;
            d[18 + i] = self.sigma_mag_bias;
        }
        for j in 0..9 {
            // distortion block is vec(D) column-major: diagonal entries of
            // D sit at positions 0, 4, 8
            d[9 + j] = if j % 4 == 0 {
                self.sigma_scale
            } else {
                self.sigma_cross
            };
        }
        d[21] = self.sigma_dip;
        SMatrix::from_diagonal(&d.map(|s| s * s))
    }
}

/// Filter iterate: orientation, parameters, and their joint covariance in
/// the error-state layout (rows/cols 0..3 orientation, 3.. parameters).
#[derive(Clone, Debug)]
pub struct AugmentedState {
    pub rotation: Rotation3<f64>,
    pub params: CalibrationParams,
    pub covariance: SMatrix<f64, ERROR_DIM, ERROR_DIM>,
    /// Number of measurement updates performed (one per keyframe).
    pub updates: usize,
}

/// Scatter a residual block's Jacobians into a measurement matrix row
/// block, negated (H = ∂h/∂x = −∂e/∂x).
fn scatter_h(h: &mut SMatrix<f64, 6, ERROR_DIM>, row0: usize, block: &ResidualBlock) {
    for jb in &block.jacobians {
        let (col0, dim) = match jb.var {
            VarId::State(_) => (0, 3),
            VarId::Theta { offset, dim } => (3 + offset, dim),
        };
        for c in 0..dim {
            for r in 0..3 {
                h[(row0 + r, col0 + c)] -= jb.mat[(r, c)];
            }
        }
    }
}

fn predict(
    state: &mut AugmentedState,
    gyro: &Vector3<f64>,
    dt: f64,
    sigma_gyro: f64,
    step: usize,
) {
    let phi = (gyro - state.params.gyro_bias) * dt;
    let mut r_next = state.rotation * so3::exp_map(&phi);
    if (step + 1) % so3::ORTHONORMALIZE_EVERY == 0 {
        r_next = so3::orthonormalize(&r_next);
    }
    // error dynamics: δR⁺ = δR − R̂⁺·J_r(φ)·dt·(δo_ω + n)
    let g = r_next.matrix() * so3::right_jacobian(&phi) * dt;
    let mut f = SMatrix::<f64, ERROR_DIM, ERROR_DIM>::identity();
    f.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-g));
    let mut p = f * state.covariance * f.transpose();
    let q = g * g.transpose() * (sigma_gyro * sigma_gyro);
    for r in 0..3 {
        for c in 0..3 {
            p[(r, c)] += q[(r, c)];
        }
    }
    state.covariance = (p + p.transpose()) * 0.5;
    state.rotation = r_next;
}

fn measurement_update(
    state: &mut AugmentedState,
    accel: &Vector3<f64>,
    mag: &Vector3<f64>,
    field: &ReferenceField,
    noise: &NoiseConfig,
    step: usize,
) -> Result<()> {
    let ra = accel_residual(accel, &state.rotation, 0, &state.params, field, &UNIT_WHITENING);
    let rm = mag_residual(mag, &state.rotation, 0, &state.params, field, &UNIT_WHITENING);

    let mut nu = SVector::<f64, 6>::zeros();
    nu.fixed_rows_mut::<3>(0).copy_from(&ra.value);
    nu.fixed_rows_mut::<3>(3).copy_from(&rm.value);
    let mut h = SMatrix::<f64, 6, ERROR_DIM>::zeros();
    scatter_h(&mut h, 0, &ra);
    scatter_h(&mut h, 3, &rm);

    let mut r_meas = SMatrix::<f64, 6, 6>::zeros();
    for i in 0..3 {
        r_meas[(i, i)] = noise.sigma_accel * noise.sigma_accel;
        r_meas[(3 + i, 3 + i)] = noise.sigma_mag * noise.sigma_mag;
    }
    let s = h * state.covariance * h.transpose() + r_meas;
    let chol = s.cholesky().ok_or(Error::FilterDivergence { step })?;
    let gain = state.covariance * h.transpose() * chol.inverse();
    let delta = gain * nu;

    state.rotation =
        so3::exp_map(&delta.fixed_rows::<3>(0).into_owned()) * state.rotation;
    let mut theta_step = [0.0; THETA_DIM];
    for i in 0..THETA_DIM {
        theta_step[i] = delta[3 + i];
    }
    state.params = state.params.retract(&theta_step);

    // Joseph form keeps the covariance symmetric positive semidefinite
    let i_kh = SMatrix::<f64, ERROR_DIM, ERROR_DIM>::identity() - gain * h;
    let p = i_kh * state.covariance * i_kh.transpose()
        + gain * r_meas * gain.transpose();
    state.covariance = (p + p.transpose()) * 0.5;
    state.updates += 1;
    if !state.covariance.iter().all(|x| x.is_finite()) {
        return Err(Error::FilterDivergence { step });
    }
    Ok(())
}

/// One-pass augmented-state EKF calibration.
///
/// Orientation is propagated with the bias-corrected gyro between samples;
/// at every keyframe the stacked accelerometer+magnetometer measurement
/// updates orientation and parameters jointly.
pub fn wu_ekf(
    dataset: &Dataset,
    field: ReferenceField,
    noise: &NoiseConfig,
    init: &InitBundle,
    priors: &EkfPriors,
) -> Result<(CalibrationParams, AugmentedState)> {
    dataset.validate()?;
    noise.validate()?;
    let rotation = *init.trajectory0.first().ok_or(Error::TooFewSamples {
        context: "filter initialization",
    })?;
    let mut state = AugmentedState {
        rotation,
        params: init.params0.clone(),
        covariance: priors.initial_covariance(),
        updates: 0,
    };
    for k in 0..dataset.len() {
        if k % dataset.rate_ratio == 0 {
            let mag = dataset.mag[k].expect("keyframe carries a magnetometer sample");
            measurement_update(&mut state, &dataset.accel[k], &mag, &field, noise, k)?;
        }
        if k + 1 < dataset.len() {
            predict(&mut state, &dataset.gyro[k], dataset.dt, noise.sigma_gyro, k);
        }
    }
    Ok((state.params.clone(), state))
}

/// Marginal likelihood of one parameter vector, with the per-keyframe
/// innovations and their covariances that make it up.
#[derive(Clone, Debug)]
pub struct LikelihoodEvaluation {
    pub params: CalibrationParams,
    /// −log p(measurements | params); +∞ when the filter diverges.
    pub neg_log_likelihood: f64,
    pub innovations: Vec<SVector<f64, 6>>,
    pub innovation_covariances: Vec<SMatrix<f64, 6, 6>>,
}

/// Evaluate the marginal negative log-likelihood of `params` by running a
/// 3-state orientation EKF over the dataset and accumulating the Gaussian
/// innovation terms ½(ln det 2πS + νᵀS⁻¹ν) at every keyframe.
pub fn evaluate_likelihood(
    dataset: &Dataset,
    field: &ReferenceField,
    noise: &NoiseConfig,
    params: &CalibrationParams,
    initial_rotation: &Rotation3<f64>,
    prior_rotation_sigma: f64,
) -> LikelihoodEvaluation {
    const LN_2PI: f64 = 1.8378770664093453;
    let mut rot = *initial_rotation;
    let mut p = SMatrix::<f64, 3, 3>::identity() * prior_rotation_sigma.powi(2);
    let mut nll = 0.0;
    let mut innovations = Vec::new();
    let mut covariances = Vec::new();

    let mut r_meas = SMatrix::<f64, 6, 6>::zeros();
    for i in 0..3 {
        r_meas[(i, i)] = noise.sigma_accel * noise.sigma_accel;
        r_meas[(3 + i, 3 + i)] = noise.sigma_mag * noise.sigma_mag;
    }
    let diverged = |params: &CalibrationParams| LikelihoodEvaluation {
        params: params.clone(),
        neg_log_likelihood: f64::INFINITY,
        innovations: Vec::new(),
        innovation_covariances: Vec::new(),
    };

    for k in 0..dataset.len() {
        if k % dataset.rate_ratio == 0 {
            let mag = dataset.mag[k].expect("keyframe carries a magnetometer sample");
            let ra = accel_residual(
                &dataset.accel[k],
                &rot,
                0,
                params,
                field,
                &UNIT_WHITENING,
            );
            let rm = mag_residual(&mag, &rot, 0, params, field, &UNIT_WHITENING);
            let mut nu = SVector::<f64, 6>::zeros();
            nu.fixed_rows_mut::<3>(0).copy_from(&ra.value);
            nu.fixed_rows_mut::<3>(3).copy_from(&rm.value);
            // orientation columns only: H = −∂e/∂δR
            let mut h = SMatrix::<f64, 6, 3>::zeros();
            for (row0, block) in [(0, &ra), (3, &rm)] {
                for jb in &block.jacobians {
                    if let VarId::State(_) = jb.var {
                        for c in 0..3 {
                            for r in 0..3 {
                                h[(row0 + r, c)] -= jb.mat[(r, c)];
                            }
                        }
                    }
                }
            }
            let s = h * p * h.transpose() + r_meas;
            let Some(chol) = s.cholesky() else {
                return diverged(params);
            };
            let ln_det = 2.0 * chol.l().diagonal().map(f64::ln).sum();
            let white = chol.solve(&nu);
            nll += 0.5 * (6.0 * LN_2PI + ln_det + nu.dot(&white));
            if !nll.is_finite() {
                return diverged(params);
            }
            let gain = p * h.transpose() * chol.inverse();
            rot = so3::exp_map(&(gain * nu)) * rot;
            let i_kh = SMatrix::<f64, 3, 3>::identity() - gain * h;
            let pp = i_kh * p * i_kh.transpose() + gain * r_meas * gain.transpose();
            p = (pp + pp.transpose()) * 0.5;
            innovations.push(nu);
            covariances.push(s);
        }
        if k + 1 < dataset.len() {
            let phi = (dataset.gyro[k] - params.gyro_bias) * dataset.dt;
            rot *= so3::exp_map(&phi);
            if (k + 1) % so3::ORTHONORMALIZE_EVERY == 0 {
                rot = so3::orthonormalize(&rot);
            }
            let g = rot.matrix() * so3::right_jacobian(&phi) * dataset.dt;
            let q = g * g.transpose() * (noise.sigma_gyro * noise.sigma_gyro);
            p += q;
        }
    }
    LikelihoodEvaluation {
        params: params.clone(),
        neg_log_likelihood: nll,
        innovations,
        innovation_covariances: covariances,
    }
}

/// Central-difference gradient of the marginal negative log-likelihood.
/// Returns the gradient and the number of EKF passes spent (always
/// `2 · 19`); the passes are independent and run in parallel.
pub fn nll_gradient(
    dataset: &Dataset,
    field: &ReferenceField,
    noise: &NoiseConfig,
    params: &CalibrationParams,
    initial_rotation: &Rotation3<f64>,
    prior_rotation_sigma: f64,
    fd_step: f64,
) -> (SVector<f64, THETA_DIM>, usize) {
    let theta = params.to_vector();
    let step_of = |i: usize| fd_step * theta[i].abs().max(1.0);
    let evals = parallel::map_indexed(2 * THETA_DIM, |j| {
        let i = j / 2;
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        let mut v = theta;
        v[i] += sign * step_of(i);
        evaluate_likelihood(
            dataset,
            field,
            noise,
            &CalibrationParams::from_vector(&v),
            initial_rotation,
            prior_rotation_sigma,
        )
        .neg_log_likelihood
    });
    let mut grad = SVector::<f64, THETA_DIM>::zeros();
    for i in 0..THETA_DIM {
        grad[i] = (evals[2 * i] - evals[2 * i + 1]) / (2.0 * step_of(i));
    }
    (grad, 2 * THETA_DIM)
}

/// Settings for the maximum-likelihood optimizer.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MlOptions {
    pub max_iterations: usize,
    /// Stop when the accepted step norm falls below this.
    pub step_tolerance: f64,
    /// Relative central-difference step for the gradient.
    pub fd_step: f64,
    /// Orientation prior σ for the marginalizing filter (rad).
    pub prior_rotation_sigma: f64,
}

impl Default for MlOptions {
    fn default() -> Self {
        Self {
            max_iterations: 60,
            step_tolerance: 1e-6,
            fd_step: 1e-6,
            prior_rotation_sigma: 5.0_f64.to_radians(),
        }
    }
}

/// Result of the maximum-likelihood calibration.
#[derive(Clone, Debug)]
pub struct MlEstimate {
    pub params: CalibrationParams,
    pub neg_log_likelihood: f64,
    /// Quasi-Newton iterations taken.
    pub iterations: usize,
    /// Total EKF forward passes (gradients + line searches + seed).
    pub ekf_passes: usize,
    pub converged: bool,
}

/// Maximum-likelihood calibration: BFGS on the marginal negative
/// log-likelihood with central-difference gradients and a backtracking
/// Armijo line search.
pub fn kok_ml(
    dataset: &Dataset,
    field: ReferenceField,
    noise: &NoiseConfig,
    init: &InitBundle,
    opts: &MlOptions,
) -> Result<MlEstimate> {
    dataset.validate()?;
    noise.validate()?;
    let r0 = *init.trajectory0.first().ok_or(Error::TooFewSamples {
        context: "likelihood initialization",
    })?;
    let nll_of = |v: &SVector<f64, THETA_DIM>| {
        evaluate_likelihood(
            dataset,
            &field,
            noise,
            &CalibrationParams::from_vector(v),
            &r0,
            opts.prior_rotation_sigma,
        )
        .neg_log_likelihood
    };

    let mut x = init.params0.to_vector();
    let mut f = nll_of(&x);
    let mut passes = 1;
    if !f.is_finite() {
        return Err(Error::FilterDivergence { step: 0 });
    }
    let (mut g, c) = nll_gradient(
        dataset,
        &field,
        noise,
        &CalibrationParams::from_vector(&x),
        &r0,
        opts.prior_rotation_sigma,
        opts.fd_step,
    );
    passes += c;

    type Hess = SMatrix<f64, THETA_DIM, THETA_DIM>;
    let mut h_inv = Hess::identity();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iterations {
        iterations += 1;
        let mut p = -(h_inv * g);
        if p.dot(&g) >= 0.0 {
            // curvature model broke down; restart from steepest descent
            h_inv = Hess::identity();
            p = -g;
        }
        // backtracking Armijo line search
        let slope = g.dot(&p);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = x + p * alpha;
            let fc = nll_of(&cand);
            passes += 1;
            if fc <= f + 1e-4 * alpha * slope {
                accepted = Some((cand, fc));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_next, f_next)) = accepted else {
            break; // no descent possible at machine precision
        };
        let s = x_next - x;
        let (g_next, c) = nll_gradient(
            dataset,
            &field,
            noise,
            &CalibrationParams::from_vector(&x_next),
            &r0,
            opts.prior_rotation_sigma,
            opts.fd_step,
        );
        passes += c;
        let y = g_next - g;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            // BFGS inverse-Hessian update
            let rho = 1.0 / sy;
            let i = Hess::identity();
            let left = i - (s * y.transpose()) * rho;
            h_inv = left * h_inv * left.transpose() + (s * s.transpose()) * rho;
        }
        let step_norm = s.norm();
        x = x_next;
        f = f_next;
        g = g_next;
        if step_norm < opts.step_tolerance {
            converged = true;
            break;
        }
    }
    Ok(MlEstimate {
        params: CalibrationParams::from_vector(&x),
        neg_log_likelihood: f,
        iterations,
        ekf_passes: passes,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::InitBundle;
    use crate::sim::{simulate, NoiseDensities, SimConfig, SimOutput};
    use approx::assert_relative_eq;
    use rand::{RngExt, SeedableRng};

    fn sim(seed: u64, duration_s: f64, noiseless: bool, rate_ratio: usize) -> SimOutput {
        let mut cfg = SimConfig {
            seed,
            duration_s,
            rate_ratio,
            ..Default::default()
        };
        if noiseless {
            cfg.densities = NoiseDensities::zero();
        }
        simulate(&cfg).unwrap()
    }

    fn truth_init(out: &SimOutput) -> InitBundle {
        InitBundle {
            params0: out.truth.params.clone(),
            trajectory0: out
                .dataset
                .keyframes()
                .map(|k| out.truth.trajectory[k])
                .collect(),
            stationary_span: 0..160,
            intrinsic_rms: 0.0,
        }
    }

    #[test]
    fn truth_is_a_fixed_point_of_the_filter_on_clean_data() {
        let out = sim(20, 20.0, true, 1);
        let init = truth_init(&out);
        let (params, state) = wu_ekf(
            &out.dataset,
            ReferenceField::default(),
            &out.noise,
            &init,
            &EkfPriors::default(),
        )
        .unwrap();
        let drift = (params.to_vector() - out.truth.params.to_vector()).norm();
        assert!(drift < 1e-9, "parameters drifted by {drift:.2e}");
        assert_eq!(state.updates, out.dataset.num_keyframes());
    }

    #[test]
    fn update_count_equals_keyframe_count_when_decimated() {
        let out = sim(21, 20.0, true, 4);
        let init = truth_init(&out);
        let (_, state) = wu_ekf(
            &out.dataset,
            ReferenceField::default(),
            &out.noise,
            &init,
            &EkfPriors::default(),
        )
        .unwrap();
        assert_eq!(state.updates, out.dataset.num_keyframes());
        assert_eq!(state.updates, out.dataset.len().div_ceil(4));
    }

    #[test]
    fn innovations_vanish_at_the_truth_on_clean_data() {
        let out = sim(22, 20.0, true, 1);
        let eval = evaluate_likelihood(
            &out.dataset,
            &ReferenceField::default(),
            &out.noise,
            &out.truth.params,
            &out.truth.trajectory[0],
            5.0_f64.to_radians(),
        );
        assert_eq!(eval.innovations.len(), out.dataset.num_keyframes());
        let max_nu = eval
            .innovations
            .iter()
            .map(|n| n.norm())
            .fold(0.0, f64::max);
        assert!(max_nu < 1e-9, "largest innovation {max_nu:.2e}");
        assert!(eval.neg_log_likelihood.is_finite());
    }

    #[test]
    fn truth_beats_perturbed_parameters_in_likelihood() {
        let out = sim(23, 20.0, true, 1);
        let field = ReferenceField::default();
        let r0 = out.truth.trajectory[0];
        let sigma = 5.0_f64.to_radians();
        let base = evaluate_likelihood(
            &out.dataset,
            &field,
            &out.noise,
            &out.truth.params,
            &r0,
            sigma,
        )
        .neg_log_likelihood;

        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(24);
        for _ in 0..50 {
            let mut v = out.truth.params.to_vector();
            for i in 0..THETA_DIM {
                v[i] += v[i].abs().max(0.05) * rng.random_range(-0.03..0.03);
            }
            let nll = evaluate_likelihood(
                &out.dataset,
                &field,
                &out.noise,
                &CalibrationParams::from_vector(&v),
                &r0,
                sigma,
            )
            .neg_log_likelihood;
            assert!(
                nll > base,
                "perturbation scored {nll:.3} vs truth {base:.3}"
            );
        }
    }

    #[test]
    fn gradient_spends_exactly_two_passes_per_parameter() {
        let out = sim(25, 10.0, true, 1);
        let (_, passes) = nll_gradient(
            &out.dataset,
            &ReferenceField::default(),
            &out.noise,
            &out.truth.params,
            &out.truth.trajectory[0],
            5.0_f64.to_radians(),
            1e-6,
        );
        assert_eq!(passes, 2 * THETA_DIM);
    }

    #[test]
    fn ml_descends_from_a_perturbed_start() {
        // 20 s leaves a near-flat heading/bias valley; a minute of motion
        // makes the likelihood optimum sit tightly on the truth.
        let out = sim(26, 60.0, true, 1);
        let field = ReferenceField::default();
        let mut start = out.truth.params.clone();
        start.mag_bias += Vector3::new(0.3, -0.2, 0.25);
        start.accel_bias += Vector3::new(0.05, -0.04, 0.06);
        let init = InitBundle {
            params0: start.clone(),
            trajectory0: out
                .dataset
                .keyframes()
                .map(|k| out.truth.trajectory[k])
                .collect(),
            stationary_span: 0..160,
            intrinsic_rms: 0.0,
        };
        let before = evaluate_likelihood(
            &out.dataset,
            &field,
            &out.noise,
            &start,
            &out.truth.trajectory[0],
            5.0_f64.to_radians(),
        )
        .neg_log_likelihood;
        let est = kok_ml(
            &out.dataset,
            field,
            &out.noise,
            &init,
            &MlOptions {
                max_iterations: 60,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            est.neg_log_likelihood < before - 1.0,
            "nll {:.3} did not improve on {:.3}",
            est.neg_log_likelihood,
            before
        );
        assert!(est.converged, "stopped at the iteration cap");
        let err_after = (est.params.mag_bias - out.truth.params.mag_bias).norm();
        assert!(err_after < 0.01, "mag bias error {err_after:.4}");
        assert!(est.ekf_passes > 2 * THETA_DIM);
        // the likelihood optimum must not sit above the truth's value
        let at_truth = evaluate_likelihood(
            &out.dataset,
            &field,
            &out.noise,
            &out.truth.params,
            &out.truth.trajectory[0],
            5.0_f64.to_radians(),
        )
        .neg_log_likelihood;
        assert!(est.neg_log_likelihood <= at_truth + 0.01);
    }

    #[test]
    fn filter_stays_within_a_factor_of_the_joint_solver() {
        use crate::init::{build_init, InitConfig};
        use crate::solver::joint::{solve_joint_map, JointOptions, JointPoint};
        let out = sim(27, 120.0, false, 1);
        let field = ReferenceField::default();
        let cfg = InitConfig::with_dip_deg(72.0);
        let init = build_init(&out.dataset, &out.noise, &cfg).unwrap();

        let (ekf_params, _) =
            wu_ekf(&out.dataset, field, &out.noise, &init, &EkfPriors::default()).unwrap();
        let joint = solve_joint_map(
            &out.dataset,
            field,
            &out.noise,
            JointPoint {
                params: init.params0.clone(),
                orientations: init.trajectory0.clone(),
            },
            &JointOptions::default(),
        )
        .unwrap();

        let t = &out.truth.params;
        let groups: [(&str, f64, f64); 4] = [
            (
                "accel bias",
                (ekf_params.accel_bias - t.accel_bias).norm(),
                (joint.params.accel_bias - t.accel_bias).norm(),
            ),
            (
                "gyro bias",
                (ekf_params.gyro_bias - t.gyro_bias).norm(),
                (joint.params.gyro_bias - t.gyro_bias).norm(),
            ),
            (
                "distortion",
                (ekf_params.distortion - t.distortion).norm(),
                (joint.params.distortion - t.distortion).norm(),
            ),
            (
                "mag bias",
                (ekf_params.mag_bias - t.mag_bias).norm(),
                (joint.params.mag_bias - t.mag_bias).norm(),
            ),
        ];
        for (name, ekf_err, joint_err) in groups {
            assert!(
                ekf_err <= 5.0 * joint_err + 1e-3,
                "{name}: filter {ekf_err:.2e} vs joint {joint_err:.2e}"
            );
        }
    }

    #[test]
    fn likelihood_cost_grows_linearly_with_dataset_length() {
        let short = sim(28, 40.0, true, 1);
        let long = sim(28, 80.0, true, 1);
        let field = ReferenceField::default();
        let time = |out: &SimOutput| {
            let mut best = f64::INFINITY;
            for _ in 0..5 {
                let t0 = std::time::Instant::now();
                let e = evaluate_likelihood(
                    &out.dataset,
                    &field,
                    &out.noise,
                    &out.truth.params,
                    &out.truth.trajectory[0],
                    5.0_f64.to_radians(),
                );
                assert!(e.neg_log_likelihood.is_finite());
                best = best.min(t0.elapsed().as_secs_f64());
            }
            best
        };
        let t_short = time(&short);
        let t_long = time(&long);
        let ratio = t_long / t_short;
        // double the data ≈ double the work; generous bound for CI noise
        assert!(
            ratio < 4.0,
            "2× data took {ratio:.2}× the time ({t_short:.4}s → {t_long:.4}s)"
        );
    }

    #[test]
    fn innovation_covariances_match_the_innovation_scatter() {
        // whitened innovations on noisy data should have unit variance
        let out = sim(29, 60.0, false, 1);
        let eval = evaluate_likelihood(
            &out.dataset,
            &ReferenceField::default(),
            &out.noise,
            &out.truth.params,
            &out.truth.trajectory[0],
            5.0_f64.to_radians(),
        );
        let mut acc = 0.0;
        let mut n = 0.0;
        for (nu, s) in eval.innovations.iter().zip(&eval.innovation_covariances) {
            let white = s.cholesky().unwrap().solve(nu);
            acc += nu.dot(&white);
            n += 6.0;
        }
        // νᵀS⁻¹ν sums to a χ² with `n` degrees of freedom
        assert_relative_eq!(acc / n, 1.0, max_relative = 0.1);
    }
}
