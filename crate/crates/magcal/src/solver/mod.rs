//! Sparsity-exploiting batch MAP solver.
//!
//! [`ManifoldProblem`] describes a nonlinear least-squares problem over M
//! per-epoch states (fixed runtime dimension, e.g. orientation tangents)
//! plus one shared parameter vector θ, with residuals that couple at most
//! adjacent states. [`levenberg_marquardt`] minimizes the total whitened
//! cost `Σ ‖r‖²` by damped Gauss–Newton steps, each computed in O(M) by the
//! arrow-structured factorization in [`arrow`].
//!
//! Parallel/sequential determinism: cost evaluation and assembly follow a
//! fixed chunking and in-order reduction, so results are bit-identical with
//! the `parallel` feature on or off, and independent of thread count.

pub mod arrow;
pub mod joint;

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::Result;
use crate::parallel;
use crate::residuals::ResidualBlock;

pub use arrow::{
    assemble_normal_equations, assemble_normal_equations_seq, ArrowSolution, ArrowSystem,
};
pub use joint::{solve_joint_map, CalibrationProblem, JointEstimate, JointOptions, JointPoint};

/// View of one candidate update: a θ increment plus stacked per-state
/// increments (`state_dim` coordinates per state).
pub struct StepView<'a> {
    pub theta: &'a [f64],
    pub states: &'a [f64],
    pub state_dim: usize,
}

impl<'a> StepView<'a> {
    pub fn state(&self, i: usize) -> &'a [f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }
}

/// A nonlinear least-squares problem with arrow sparsity.
///
/// Contract: every residual block returned by [`ManifoldProblem::block`]
/// may reference θ slices and at most two *adjacent* state indices.
pub trait ManifoldProblem: Sync {
    /// A full iterate (states + parameters) of the problem.
    type Point: Clone + Send + Sync;

    fn theta_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn num_states(&self) -> usize;
    fn num_blocks(&self) -> usize;

    /// Evaluate residual block `idx` (value and Jacobians) at `point`.
    fn block(&self, idx: usize, point: &Self::Point) -> Result<ResidualBlock>;

    /// Residual value only; override when the value is much cheaper than
    /// the full Jacobian evaluation.
    fn block_value(&self, idx: usize, point: &Self::Point) -> Result<Vector3<f64>> {
        Ok(self.block(idx, point)?.value)
    }

    /// Apply an increment: states via their retraction, θ additively.
    fn retract(&self, point: &Self::Point, step: &StepView<'_>) -> Self::Point;
}

/// Marks θ coordinates that must stay at their initial values. Frozen
/// coordinates get exact zero increments (their normal-equation rows are
/// replaced after damping, so the pin is independent of λ).
#[derive(Clone, Debug)]
pub struct FreezeMask {
    frozen: Vec<bool>,
}

impl FreezeMask {
    pub fn none(theta_dim: usize) -> Self {
        Self {
            frozen: vec![false; theta_dim],
        }
    }

    pub fn freeze_range(&mut self, offset: usize, dim: usize) {
        for j in offset..offset + dim {
            self.frozen[j] = true;
        }
    }

    pub fn is_frozen(&self, idx: usize) -> bool {
        self.frozen.get(idx).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }

    pub fn any(&self) -> bool {
        self.frozen.iter().any(|&f| f)
    }
}

/// Damped Gauss–Newton settings.
#[derive(Clone, Debug, Serialize)]
pub struct LmConfig {
    /// Cap on accepted iterations.
    pub max_iterations: usize,
    /// Stop once an accepted (or negligible rejected) step has norm below
    /// this; checked after the step is applied.
    pub step_tolerance: f64,
    pub lambda_init: f64,
    pub lambda_min: f64,
    /// Exceeding this damping aborts with the best point found so far.
    pub lambda_max: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tolerance: 1e-6,
            lambda_init: 1e-4,
            lambda_min: 1e-12,
            lambda_max: 1e8,
        }
    }
}

/// Why the optimizer stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Step norm fell below the tolerance — converged.
    StepTolerance,
    /// Accepted-iteration cap reached.
    MaxIterations,
    /// Damping grew past its ceiling without finding a downhill step; the
    /// best iterate seen is returned.
    LambdaCeiling,
}

/// Optimization trace and diagnostics.
#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub stop_reason: StopReason,
    pub lambda_final: f64,
    /// ‖Jᵀr‖_∞ of the last assembled system (the linearization point of
    /// the final step, not the returned iterate itself).
    pub gradient_inf_norm: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Norm of each accepted step, in acceptance order.
    pub step_norms: Vec<f64>,
    /// Wall-clock time of the optimization loop (seconds).
    pub wall_time_s: f64,
}

/// Total cost `Σ ‖r_i‖²` at `point` (chunk-parallel evaluation, in-order
/// summation — bit-identical to [`evaluate_cost_seq`]).
pub fn evaluate_cost<P: ManifoldProblem>(problem: &P, point: &P::Point) -> Result<f64> {
    let vals = parallel::try_map_indexed(problem.num_blocks(), |i| {
        problem.block_value(i, point).map(|v| v.norm_squared())
    })?;
    Ok(vals.iter().sum())
}

/// Sequential reference implementation of [`evaluate_cost`].
pub fn evaluate_cost_seq<P: ManifoldProblem>(problem: &P, point: &P::Point) -> Result<f64> {
    let vals = parallel::try_map_indexed_seq(problem.num_blocks(), |i| {
        problem.block_value(i, point).map(|v| v.norm_squared())
    })?;
    Ok(vals.iter().sum())
}

/// Minimize the problem cost with Levenberg–Marquardt damping
/// (`H + λ·diag(H)`), starting from `init`.
///
/// Step acceptance requires a strict cost decrease. Every candidate is
/// fully re-evaluated, so a step into an invalid region (e.g. a rotation
/// increment past the injectivity radius) counts as a rejection rather
/// than an error.
pub fn levenberg_marquardt<P: ManifoldProblem>(
    problem: &P,
    init: P::Point,
    freeze: &FreezeMask,
    cfg: &LmConfig,
) -> Result<(P::Point, SolveReport)> {
    assert_eq!(freeze.len(), problem.theta_dim());
    let started = std::time::Instant::now();
    let mut point = init;
    let mut cost = evaluate_cost(problem, &point)?;
    let initial_cost = cost;
    let mut cost_history = vec![cost];
    let mut step_norms = Vec::new();
    let mut lambda = cfg.lambda_init;
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let mut gradient_inf_norm = f64::NAN;

    let stop_reason = 'outer: loop {
        if accepted >= cfg.max_iterations {
            break StopReason::MaxIterations;
        }
        let system = assemble_normal_equations(problem, &point)?;
        gradient_inf_norm = system.gradient_inf_norm();

        loop {
            let attempt = system.solve(lambda, freeze);
            let mut improved = false;
            let mut step_norm = f64::INFINITY;
            match attempt {
                Ok(solution) => {
                    step_norm = solution.step_norm();
                    let step = StepView {
                        theta: &solution.theta,
                        states: &solution.states,
                        state_dim: problem.state_dim(),
                    };
                    let candidate = problem.retract(&point, &step);
                    if let Ok(new_cost) = evaluate_cost(problem, &candidate) {
                        if new_cost < cost {
                            point = candidate;
                            cost = new_cost;
                            cost_history.push(cost);
                            step_norms.push(step_norm);
                            accepted += 1;
                            lambda = (lambda / 10.0).max(cfg.lambda_min);
                            improved = true;
                        }
                    }
                }
                Err(crate::Error::IndefiniteSystem) => {}
                Err(e) => return Err(e),
            }
            if step_norm < cfg.step_tolerance {
                // Converged: either the applied step was negligible, or the
                // quadratic model proposes no meaningful move from here.
                break 'outer StopReason::StepTolerance;
            }
            if improved {
                break; // re-linearize
            }
            rejected += 1;
            lambda *= 10.0;
            if lambda > cfg.lambda_max {
                break 'outer StopReason::LambdaCeiling;
            }
        }
    };

    let report = SolveReport {
        initial_cost,
        final_cost: cost,
        accepted_steps: accepted,
        rejected_steps: rejected,
        stop_reason,
        lambda_final: lambda,
        gradient_inf_norm,
        cost_history,
        step_norms,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((point, report))
}
