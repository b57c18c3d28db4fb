//! Joint magnetometer/inertial calibration toolkit.
//!
//! The crate estimates magnetometer distortion and bias together with
//! accelerometer and gyroscope biases and the local magnetic dip angle, by
//! maximum a posteriori estimation over the product manifold of sensor
//! parameters and a full orientation trajectory. It ships:
//!
//! - [`so3`]: rotation-group primitives with the small-angle numerics the
//!   derivatives depend on;
//! - [`models`]: measurement models, parameter set, and dataset container;
//! - [`residuals`]: whitened residuals with analytic Jacobians;
//! - [`preintegration`]: gyroscope preintegration for magnetometer rates
//!   slower than the IMU rate;
//! - [`solver`]: a Levenberg–Marquardt solver exploiting the arrow sparsity
//!   of the problem (block-tridiagonal states bordered by the parameters);
//! - [`init`]: the initialization pipeline (stationary gyro bias, dead
//!   reckoning, ellipsoid fit, intrinsic refinement, extrinsic alignment);
//! - [`baselines`]: an augmented-state error EKF and a maximum-likelihood
//!   baseline for comparison;
//! - [`sim`]: a Monte Carlo simulator with counter-based per-stream RNG;
//! - [`io`], [`metrics`], [`compare`]: dataset/report serialization, error
//!   metrics, and the experiment sweep engine behind the CLI.
//!
//! With the default `parallel` feature, residual evaluation, preintegration,
//! finite-difference probes, and experiment cells run on rayon; results are
//! bit-identical to the sequential fallback because all reductions happen in
//! deterministic index order.

pub mod baselines;
pub mod compare;
mod error;
pub mod init;
pub mod io;
pub mod metrics;
pub mod models;
mod parallel;
pub mod preintegration;
pub mod residuals;
pub mod sim;
pub mod so3;
pub mod solver;

pub use error::{Error, Result};
pub use parallel::configure_threads;

/// Version string embedded in calibration reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
