//! The joint calibration problem: sensor parameters θ ∈ ℝ¹⁹ and one
//! orientation state per keyframe, estimated together by batch MAP.
//!
//! At rate ratio N = 1 every sample carries a state and consecutive states
//! are tied by the full-rate gyroscope residual. At N > 1 only keyframes
//! (every N-th sample) carry states; the intervening gyroscope samples are
//! compressed into preintegrated relative-rotation factors, and the
//! accelerometer/magnetometer residuals attach at the keyframes.
//!
//! The preintegrated factors are linearized at a nominal gyro bias. If the
//! converged bias has drifted more than [`RELINEARIZE_BIAS_THRESHOLD`] from
//! that nominal value, the factors are rebuilt once at the new bias and the
//! solve repeats from the current iterate.

use nalgebra::{Rotation3, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::{CalibrationParams, Dataset, NoiseConfig, ReferenceField, THETA_DIM};
use crate::preintegration::{preintegrate_spans, preint_residual, Preintegrated};
use crate::residuals::{accel_residual, gyro_residual, mag_residual, ResidualBlock, Whitening};
use crate::so3;
use crate::solver::{
    assemble_normal_equations, evaluate_cost, levenberg_marquardt, FreezeMask, LmConfig,
    ManifoldProblem, SolveReport, StepView,
};

/// Rebuild preintegrated factors when the gyro bias moved further than this
/// from their linearization point (rad/s).
pub const RELINEARIZE_BIAS_THRESHOLD: f64 = 0.01;

/// A Schur complement smaller than this flags insufficient rotation
/// excitation: some θ direction is effectively unobserved.
pub const EXCITATION_MIN_EIGENVALUE: f64 = 1e-3;

/// One iterate of the joint problem: parameters plus per-state rotations.
#[derive(Clone, Debug)]
pub struct JointPoint {
    pub params: CalibrationParams,
    /// One orientation per keyframe state (body → navigation).
    pub orientations: Vec<Rotation3<f64>>,
}

/// The joint MAP problem over one dataset.
pub struct CalibrationProblem<'a> {
    dataset: &'a Dataset,
    field: ReferenceField,
    whitening: Whitening,
    sigma_gyro: f64,
    /// Sample index of each state.
    keyframes: Vec<usize>,
    /// Compressed gyro factors (rate ratio > 1 only).
    preintegrated: Option<Vec<Preintegrated>>,
}

impl<'a> CalibrationProblem<'a> {
    /// Build the problem; preintegrates keyframe spans at `nominal_gyro_bias`
    /// when the dataset's rate ratio exceeds 1.
    pub fn new(
        dataset: &'a Dataset,
        field: ReferenceField,
        noise: &NoiseConfig,
        nominal_gyro_bias: &Vector3<f64>,
    ) -> Result<Self> {
        dataset.validate()?;
        noise.validate()?;
        let keyframes: Vec<usize> = dataset.keyframes().collect();
        if keyframes.len() < 2 {
            return Err(Error::TooFewSamples {
                context: "joint calibration needs at least two keyframes",
            });
        }
        let preintegrated = (dataset.rate_ratio > 1).then(|| {
            preintegrate_spans(
                &dataset.gyro,
                dataset.rate_ratio,
                nominal_gyro_bias,
                dataset.dt,
            )
        });
        Ok(Self {
            dataset,
            field,
            whitening: Whitening::from_sigmas(
                noise.sigma_accel,
                noise.sigma_gyro,
                noise.sigma_mag,
            ),
            sigma_gyro: noise.sigma_gyro,
            keyframes,
            preintegrated,
        })
    }

    /// Bias the preintegrated factors are linearized at (`None` at N = 1,
    /// where no linearization point exists).
    pub fn nominal_gyro_bias(&self) -> Option<Vector3<f64>> {
        self.preintegrated
            .as_ref()
            .and_then(|p| p.first())
            .map(|p| p.nominal_bias)
    }

    fn transition(&self, i: usize, point: &JointPoint) -> Result<ResidualBlock> {
        let k = self.keyframes[i];
        match &self.preintegrated {
            None => gyro_residual(
                &self.dataset.gyro[k],
                &point.orientations[i],
                &point.orientations[i + 1],
                i,
                &point.params,
                self.dataset.dt,
                &self.whitening,
            ),
            Some(pre) => preint_residual(
                &pre[i],
                &point.orientations[i],
                &point.orientations[i + 1],
                i,
                &point.params.gyro_bias,
                self.sigma_gyro,
            ),
        }
    }

    fn transition_value(&self, i: usize, point: &JointPoint) -> Result<Vector3<f64>> {
        let k = self.keyframes[i];
        let r_rel = point.orientations[i].inverse() * point.orientations[i + 1];
        match &self.preintegrated {
            None => {
                let phi = so3::log_map(&r_rel);
                let e = self.dataset.gyro[k] - phi / self.dataset.dt - point.params.gyro_bias;
                Ok(e * self.whitening.gyro)
            }
            Some(pre) => {
                let p = &pre[i];
                let q = p.corrected(&point.params.gyro_bias).inverse() * r_rel;
                Ok(so3::log_map(&q) * p.whitening_scale(self.sigma_gyro))
            }
        }
    }
}

impl ManifoldProblem for CalibrationProblem<'_> {
    type Point = JointPoint;

    fn theta_dim(&self) -> usize {
        THETA_DIM
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn num_states(&self) -> usize {
        self.keyframes.len()
    }

    fn num_blocks(&self) -> usize {
        3 * self.keyframes.len() - 1
    }

    fn block(&self, idx: usize, point: &JointPoint) -> Result<ResidualBlock> {
        let i = idx / 3;
        let k = self.keyframes[i];
        match idx % 3 {
            0 => Ok(accel_residual(
                &self.dataset.accel[k],
                &point.orientations[i],
                i,
                &point.params,
                &self.field,
                &self.whitening,
            )),
            1 => Ok(mag_residual(
                self.dataset.mag[k]
                    .as_ref()
                    .expect("keyframe sample must carry its magnetometer reading"),
                &point.orientations[i],
                i,
                &point.params,
                &self.field,
                &self.whitening,
            )),
            _ => self.transition(i, point),
        }
    }

    fn block_value(&self, idx: usize, point: &JointPoint) -> Result<Vector3<f64>> {
        let i = idx / 3;
        let k = self.keyframes[i];
        match idx % 3 {
            0 => {
                let g_body = point.orientations[i].inverse() * self.field.gravity_nav();
                let e = self.dataset.accel[k] + g_body - point.params.accel_bias;
                Ok(e * self.whitening.accel)
            }
            1 => {
                let p = &point.params;
                let m_body =
                    point.orientations[i].inverse() * self.field.mag_nav(p.dip_angle);
                let meas = self.dataset.mag[k]
                    .as_ref()
                    .expect("keyframe sample must carry its magnetometer reading");
                let e = meas - p.distortion * m_body - p.mag_bias;
                Ok(e * self.whitening.mag)
            }
            _ => self.transition_value(i, point),
        }
    }

    fn retract(&self, point: &JointPoint, step: &StepView<'_>) -> JointPoint {
        let params = point.params.retract(step.theta);
        let orientations = point
            .orientations
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let d = step.state(i);
                so3::exp_map(&Vector3::new(d[0], d[1], d[2])) * r
            })
            .collect();
        JointPoint {
            params,
            orientations,
        }
    }
}

/// Joint-solve options.
#[derive(Clone, Debug)]
pub struct JointOptions {
    pub lm: LmConfig,
    pub freeze: FreezeMask,
}

impl Default for JointOptions {
    fn default() -> Self {
        Self {
            lm: LmConfig::default(),
            freeze: FreezeMask::none(THETA_DIM),
        }
    }
}

/// Result of the joint MAP estimation.
#[derive(Clone, Debug)]
pub struct JointEstimate {
    pub params: CalibrationParams,
    pub orientations: Vec<Rotation3<f64>>,
    pub report: SolveReport,
    /// ‖Jᵀr‖_∞ evaluated at the returned iterate.
    pub final_gradient_inf_norm: f64,
    /// Smallest eigenvalue of the θ Schur complement at the solution
    /// (unfrozen coordinates), or 0 when the system is rank-deficient.
    pub schur_min_eigenvalue: f64,
    /// Set when the Schur complement indicates an unobserved θ direction.
    pub excitation_warning: bool,
    /// Whether the preintegrated factors were rebuilt at the converged bias.
    pub relinearized: bool,
}

/// Diagnostics serialized into calibration reports.
#[derive(Clone, Debug, Serialize)]
pub struct SolveDiagnostics {
    pub final_gradient_inf_norm: f64,
    pub schur_min_eigenvalue: f64,
    pub excitation_warning: bool,
    pub relinearized: bool,
}

impl JointEstimate {
    pub fn diagnostics(&self) -> SolveDiagnostics {
        SolveDiagnostics {
            final_gradient_inf_norm: self.final_gradient_inf_norm,
            schur_min_eigenvalue: self.schur_min_eigenvalue,
            excitation_warning: self.excitation_warning,
            relinearized: self.relinearized,
        }
    }
}

/// Run the joint MAP estimation from `init`.
///
/// Handles the one-shot re-linearization of preintegrated factors and
/// computes closing diagnostics (gradient certificate, excitation check).
/// Rank deficiency is reported through `excitation_warning` — never
/// silently regularized away.
pub fn solve_joint_map(
    dataset: &Dataset,
    field: ReferenceField,
    noise: &NoiseConfig,
    init: JointPoint,
    options: &JointOptions,
) -> Result<JointEstimate> {
    if init.orientations.len() != dataset.num_keyframes() {
        return Err(Error::Config(format!(
            "initial trajectory has {} states, dataset has {} keyframes",
            init.orientations.len(),
            dataset.num_keyframes()
        )));
    }
    let nominal_bias = init.params.gyro_bias;
    let problem = CalibrationProblem::new(dataset, field, noise, &nominal_bias)?;
    let (mut point, mut report) =
        levenberg_marquardt(&problem, init, &options.freeze, &options.lm)?;

    let mut relinearized = false;
    let needs_rebuild = dataset.rate_ratio > 1
        && (point.params.gyro_bias - nominal_bias).norm() > RELINEARIZE_BIAS_THRESHOLD;
    if needs_rebuild {
        relinearized = true;
        let rebuilt =
            CalibrationProblem::new(dataset, field, noise, &point.params.gyro_bias)?;
        let (point2, report2) = levenberg_marquardt(&rebuilt, point, &options.freeze, &options.lm)?;
        point = point2;
        report = SolveReport {
            initial_cost: report.initial_cost,
            final_cost: report2.final_cost,
            accepted_steps: report.accepted_steps + report2.accepted_steps,
            rejected_steps: report.rejected_steps + report2.rejected_steps,
            stop_reason: report2.stop_reason,
            lambda_final: report2.lambda_final,
            gradient_inf_norm: report2.gradient_inf_norm,
            cost_history: {
                let mut h = report.cost_history;
                h.extend_from_slice(&report2.cost_history[1..]);
                h
            },
            step_norms: {
                let mut s = report.step_norms;
                s.extend_from_slice(&report2.step_norms);
                s
            },
            wall_time_s: report.wall_time_s + report2.wall_time_s,
        };
    }

    // Closing diagnostics at the returned iterate. The factors must match
    // the ones the final solve used, so rebuild the same problem.
    let problem = CalibrationProblem::new(
        dataset,
        field,
        noise,
        &if relinearized {
            point.params.gyro_bias
        } else {
            nominal_bias
        },
    )?;
    let system = assemble_normal_equations(&problem, &point)?;
    let final_gradient_inf_norm = system.gradient_inf_norm();
    let (schur_min_eigenvalue, excitation_warning) = match system.solve(0.0, &options.freeze) {
        Ok(solution) => {
            let min_eig = solution.schur_min_eigenvalue(&options.freeze);
            (min_eig, min_eig < EXCITATION_MIN_EIGENVALUE)
        }
        Err(Error::IndefiniteSystem) => (0.0, true),
        Err(e) => return Err(e),
    };

    Ok(JointEstimate {
        params: point.params,
        orientations: point.orientations,
        report,
        final_gradient_inf_norm,
        schur_min_eigenvalue,
        excitation_warning,
        relinearized,
    })
}

/// Total whitened cost of a point under a dataset — convenience wrapper
/// used by tests and the CLI's evaluate path.
pub fn joint_cost(
    dataset: &Dataset,
    field: ReferenceField,
    noise: &NoiseConfig,
    point: &JointPoint,
) -> Result<f64> {
    let nominal = point.params.gyro_bias;
    let problem = CalibrationProblem::new(dataset, field, noise, &nominal)?;
    evaluate_cost(&problem, point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, SimConfig};
    use approx::assert_relative_eq;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn short_sim(seed: u64, noiseless: bool, rate_ratio: usize) -> crate::sim::SimOutput {
        let mut cfg = SimConfig {
            duration_s: 20.0,
            rate_hz: 80.0,
            rate_ratio,
            seed,
            ..Default::default()
        };
        if noiseless {
            cfg.densities = crate::sim::NoiseDensities::zero();
        }
        simulate(&cfg).unwrap()
    }

    fn truth_point(out: &crate::sim::SimOutput) -> JointPoint {
        JointPoint {
            params: out.truth.params.clone(),
            orientations: out
                .dataset
                .keyframes()
                .map(|k| out.truth.trajectory[k])
                .collect(),
        }
    }

    fn perturbed_point(out: &crate::sim::SimOutput, seed: u64) -> JointPoint {
        // 5° trajectory perturbation, ~20% parameter perturbation
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut p = truth_point(out);
        for r in &mut p.orientations {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            *r = so3::exp_map(&(axis * 5.0_f64.to_radians())) * *r;
        }
        let t = &mut p.params;
        for i in 0..3 {
            t.accel_bias[i] += rng.random_range(-0.1..0.1);
            t.gyro_bias[i] += rng.random_range(-0.002..0.002);
            t.mag_bias[i] += rng.random_range(-0.4..0.4);
            for j in 0..3 {
                t.distortion[(i, j)] += rng.random_range(-0.05..0.05);
            }
        }
        t.dip_angle += rng.random_range(-0.05..0.05);
        p
    }

    #[test]
    fn truth_is_a_fixed_point_on_noiseless_data() {
        let out = short_sim(50, true, 1);
        let truth = truth_point(&out);
        let problem = CalibrationProblem::new(
            &out.dataset,
            ReferenceField::default(),
            &out.noise,
            &truth.params.gyro_bias,
        )
        .unwrap();
        // cost and gradient vanish at the global optimum
        let cost = evaluate_cost(&problem, &truth).unwrap();
        assert!(cost < 1e-16, "cost at truth {cost:.3e}");
        // Whitened residuals at truth are pure rounding noise (~1e-12) but the
        // Jacobian scale is ~1/(σ·dt) ≈ 1e4, so the gradient lands around 1e-8;
        // a sign or assembly error would push it many orders of magnitude up.
        let system = assemble_normal_equations(&problem, &truth).unwrap();
        assert!(system.gradient_inf_norm() < 1e-6);

        let est = solve_joint_map(
            &out.dataset,
            ReferenceField::default(),
            &out.noise,
            truth.clone(),
            &JointOptions::default(),
        )
        .unwrap();
        assert!(est.report.final_cost < 1e-16);
        assert_eq!(est.report.accepted_steps, 0);
        assert!(!est.excitation_warning);
    }

    #[test]
    fn noiseless_recovery_from_perturbed_initialization() {
        let out = short_sim(51, true, 1);
        let start = perturbed_point(&out, 99);
        let est = solve_joint_map(
            &out.dataset,
            ReferenceField::default(),
            &out.noise,
            start,
            &JointOptions::default(),
        )
        .unwrap();
        assert!(
            est.report.final_cost < 1e-12,
            "final cost {:.3e}",
            est.report.final_cost
        );
        let truth = &out.truth.params;
        let diff = (est.params.to_vector() - truth.to_vector()).norm();
        let scale = truth.to_vector().norm();
        assert!(diff / scale < 1e-6, "relative θ error {:.3e}", diff / scale);
        // spec invariant: gradient certificate at convergence
        assert!(
            est.final_gradient_inf_norm <= 1e-6 * (1.0 + est.report.final_cost),
            "gradient ∞-norm {:.3e}",
            est.final_gradient_inf_norm
        );
        // costs strictly decrease along accepted steps
        for w in est.report.cost_history.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn preintegrated_path_recovers_noiseless_parameters() {
        let out = short_sim(52, true, 4);
        let start = perturbed_point(&out, 100);
        let est = solve_joint_map(
            &out.dataset,
            ReferenceField::default(),
            &out.noise,
            start,
            &JointOptions::default(),
        )
        .unwrap();
        let truth = &out.truth.params;
        let diff = (est.params.to_vector() - truth.to_vector()).norm();
        assert!(
            diff / truth.to_vector().norm() < 1e-5,
            "relative θ error {:.3e}",
            diff
        );
        assert!(!est.excitation_warning);
    }

    #[test]
    fn relinearization_triggers_on_a_large_bias_error() {
        let out = short_sim(53, true, 4);
        let mut start = perturbed_point(&out, 101);
        // push the initial gyro bias 0.05 rad/s off so the converged bias
        // moves far from the preintegration linearization point
        start.params.gyro_bias += Vector3::new(0.05, -0.03, 0.02);
        let est = solve_joint_map(
            &out.dataset,
            ReferenceField::default(),
            &out.noise,
            start,
            &JointOptions::default(),
        )
        .unwrap();
        assert!(est.relinearized, "expected a preintegration rebuild");
        let truth = &out.truth.params;
        let diff = (est.params.to_vector() - truth.to_vector()).norm();
        assert!(
            diff / truth.to_vector().norm() < 1e-5,
            "relative θ error after rebuild {:.3e}",
            diff
        );
    }

    #[test]
    fn frozen_dip_angle_stays_at_its_initial_value() {
        let out = short_sim(54, true, 1);
        let mut start = perturbed_point(&out, 102);
        start.params.dip_angle = out.truth.params.dip_angle + 0.02;
        let frozen_value = start.params.dip_angle;
        let mut options = JointOptions::default();
        options.freeze.freeze_range(18, 1);
        let est = solve_joint_map(
            &out.dataset,
            ReferenceField::default(),
            &out.noise,
            start,
            &options,
        )
        .unwrap();
        assert_eq!(est.params.dip_angle, frozen_value);
        // a wrong, frozen dip keeps the fit from reaching zero cost
        assert!(est.report.final_cost > 1e-10);
    }

    #[test]
    fn stationary_data_raises_the_excitation_warning() {
        let out = short_sim(55, true, 1);
        let t = out.dataset.len();
        let stationary = Dataset {
            dt: out.dataset.dt,
            rate_ratio: 1,
            gyro: vec![out.truth.params.gyro_bias; t],
            accel: vec![out.dataset.accel[0]; t],
            mag: vec![out.dataset.mag[0]; t],
        };
        let point = JointPoint {
            params: out.truth.params.clone(),
            orientations: vec![out.truth.trajectory[0]; t],
        };
        let est = solve_joint_map(
            &stationary,
            ReferenceField::default(),
            &out.noise,
            point,
            &JointOptions::default(),
        )
        .unwrap();
        assert!(
            est.excitation_warning,
            "no-rotation data must flag unobservable directions (min eig {:.3e})",
            est.schur_min_eigenvalue
        );
    }

    #[test]
    fn noisy_solve_is_deterministic() {
        let out = short_sim(56, false, 1);
        let start = perturbed_point(&out, 103);
        let run = || {
            solve_joint_map(
                &out.dataset,
                ReferenceField::default(),
                &out.noise,
                start.clone(),
                &JointOptions::default(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.report.cost_history, b.report.cost_history);
        assert_eq!(a.params.to_vector(), b.params.to_vector());
    }

    #[test]
    fn noisy_estimate_lands_near_truth() {
        // 20 s leaves a weakly observed heading/soft-iron mode with errors
        // around 5e-2; a minute of motion pins it well below the bounds here.
        let mut cfg = SimConfig {
            duration_s: 60.0,
            seed: 57,
            ..Default::default()
        };
        cfg.densities = crate::sim::NoiseDensities::default();
        let out = simulate(&cfg).unwrap();
        let start = perturbed_point(&out, 104);
        let est = solve_joint_map(
            &out.dataset,
            ReferenceField::default(),
            &out.noise,
            start,
            &JointOptions::default(),
        )
        .unwrap();
        assert!(est.report.accepted_steps < 100);
        let truth = &out.truth.params;
        // loose sanity bounds; statistical quality is covered by the
        // estimator comparison suite
        assert!((est.params.dip_angle - truth.dip_angle).abs() < 0.01);
        assert!((est.params.mag_bias - truth.mag_bias).norm() < 0.2);
        assert!((est.params.accel_bias - truth.accel_bias).norm() < 0.05);
        assert_relative_eq!(
            est.params.distortion,
            truth.distortion,
            epsilon = 2e-2
        );
    }
}
