//! Initialization pipeline.
//!
//! Produces a starting iterate for the joint solver from raw data alone:
//!
//! 1. gyro bias from a stationary prefix of the recording,
//! 2. orientation trajectory by dead-reckoning the corrected gyro,
//! 3. magnetometer ellipsoid fit → symmetric distortion and bias seed,
//! 4. magnetometer-only intrinsic refinement (lower-triangular shape `L`,
//!    bias, and per-sample field directions),
//! 5. gyro/magnetometer extrinsic alignment recovering the rotation `R`
//!    that completes the distortion `D = L·R`.
//!
//! The split in step 5 mirrors the distortion model itself: the scale/skew
//! part is lower triangular with positive diagonal, so `L` is exactly the
//! Cholesky factor of `D·Dᵀ` and `R` is the remaining alignment rotation.

use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{CalibrationParams, Dataset, NoiseConfig, RotationTrajectory, GRAVITY_DEFAULT};
use crate::residuals::{JacobianBlock, ResidualBlock, VarId};
use crate::so3;
use crate::solver::{
    evaluate_cost, levenberg_marquardt, FreezeMask, LmConfig, ManifoldProblem, StepView,
};

/// Fewest magnetometer samples accepted by the ellipsoid fit.
pub const ELLIPSOID_MIN_POINTS: usize = 100;
/// Direction-coverage floor: smallest eigenvalue of the mean outer product
/// of unit directions from the fitted center.
pub const ELLIPSOID_MIN_COVERAGE: f64 = 0.05;
/// Excitation floor for the alignment normal matrix (per measurement row).
pub const ALIGNMENT_MIN_EXCITATION: f64 = 1e-4;
/// Residual rows larger than this multiple of the median are dropped in the
/// alignment trim pass (they come from segment boundaries or glitches).
pub const ALIGNMENT_TRIM_FACTOR: f64 = 5.0;

fn default_gravity() -> f64 {
    GRAVITY_DEFAULT
}
fn default_window() -> f64 {
    1.0
}
fn default_std_factor() -> f64 {
    3.0
}
fn default_mean_max() -> f64 {
    0.05
}

/// Settings for the initialization pipeline. Only the local dip angle has
/// no default — it must come from a map or survey of the site.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InitConfig {
    /// Local magnetic dip (inclination) angle in degrees.
    pub dip_angle_deg: f64,
    /// Gravity magnitude (m/s²).
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    /// Stationarity test window (s).
    #[serde(default = "default_window")]
    pub stationary_window_s: f64,
    /// A window is stationary only if each gyro axis has sample standard
    /// deviation below this multiple of the per-sample gyro σ.
    #[serde(default = "default_std_factor")]
    pub gyro_std_factor: f64,
    /// ... and the window-mean angular rate norm stays below this (rad/s).
    /// Large enough to admit any plausible gyro bias, small enough to
    /// reject deliberate motion.
    #[serde(default = "default_mean_max")]
    pub gyro_mean_max: f64,
}

impl InitConfig {
    pub fn with_dip_deg(dip_angle_deg: f64) -> Self {
        Self {
            dip_angle_deg,
            gravity: default_gravity(),
            stationary_window_s: default_window(),
            gyro_std_factor: default_std_factor(),
            gyro_mean_max: default_mean_max(),
        }
    }
}

/// Find the maximal stationary prefix `0..end` of the recording, examined
/// in whole windows of `stationary_window_s`.
///
/// A window passes when the per-axis gyro standard deviation stays below
/// `gyro_std_factor · σ_gyro` **and** the window-mean rate norm stays below
/// `gyro_mean_max`. The mean test is what rejects smooth constant-rate
/// motion (which has near-zero variance); the variance test rejects
/// vibration and hand-held jitter.
pub fn detect_stationary_prefix(
    dataset: &Dataset,
    noise: &NoiseConfig,
    cfg: &InitConfig,
) -> Result<std::ops::Range<usize>> {
    let w = (cfg.stationary_window_s / dataset.dt).round() as usize;
    if w < 2 || dataset.len() < w {
        return Err(Error::TooFewSamples {
            context: "stationarity detection window",
        });
    }
    let mut end = 0;
    while end + w <= dataset.len() {
        let window = &dataset.gyro[end..end + w];
        let mean: Vector3<f64> = window.iter().sum::<Vector3<f64>>() / w as f64;
        let mut var = Vector3::zeros();
        for g in window {
            let d = g - mean;
            var += d.component_mul(&d);
        }
        var /= (w - 1) as f64;
        let std_ok = (0..3).all(|i| var[i].sqrt() < cfg.gyro_std_factor * noise.sigma_gyro);
        if !(std_ok && mean.norm() < cfg.gyro_mean_max) {
            break;
        }
        end += w;
    }
    if end == 0 {
        return Err(Error::NoStationarySpan);
    }
    Ok(0..end)
}

/// Gyro bias as the mean rate over the stationary prefix.
pub fn estimate_gyro_bias(
    dataset: &Dataset,
    noise: &NoiseConfig,
    cfg: &InitConfig,
) -> Result<(Vector3<f64>, std::ops::Range<usize>)> {
    let span = detect_stationary_prefix(dataset, noise, cfg)?;
    let n = span.len() as f64;
    let bias = dataset.gyro[span.clone()]
        .iter()
        .sum::<Vector3<f64>>()
        / n;
    Ok((bias, span))
}

/// Integrate the bias-corrected gyro from the identity orientation. Returns
/// one rotation per sample.
pub fn dead_reckon(dataset: &Dataset, gyro_bias: &Vector3<f64>) -> RotationTrajectory {
    let mut out = Vec::with_capacity(dataset.len());
    let mut r = Rotation3::identity();
    out.push(r);
    for (i, u) in dataset.gyro.iter().take(dataset.len() - 1).enumerate() {
        r *= so3::exp_map(&((u - gyro_bias) * dataset.dt));
        if (i + 1) % so3::ORTHONORMALIZE_EVERY == 0 {
            r = so3::orthonormalize(&r);
        }
        out.push(r);
    }
    out
}

/// Result of the algebraic ellipsoid fit: `shape · shapeᵀ` estimates the
/// symmetric part `D·Dᵀ` of the distortion, `center` estimates the bias.
#[derive(Clone, Debug)]
pub struct EllipsoidFit {
    /// Lower-triangular Cholesky factor of the fitted `D·Dᵀ`.
    pub shape: Matrix3<f64>,
    pub center: Vector3<f64>,
}

/// Least-squares quadric fit of magnetometer samples to an ellipsoid.
///
/// Each point contributes one row `[x², y², z², 2xy, 2xz, 2yz, x, y, z, 1]`
/// of the homogeneous system; the quadric coefficients are the eigenvector
/// of the smallest eigenvalue of the 10×10 normal matrix. The fit is exact
/// for noise-free data and degrades gracefully with noise.
pub fn ellipsoid_fit(points: &[Vector3<f64>]) -> Result<EllipsoidFit> {
    if points.len() < ELLIPSOID_MIN_POINTS {
        return Err(Error::TooFewSamples {
            context: "ellipsoid fit",
        });
    }
    let mut normal = SMatrix::<f64, 10, 10>::zeros();
    for p in points {
        let (x, y, z) = (p.x, p.y, p.z);
        let row = SVector::<f64, 10>::from_column_slice(&[
            x * x,
            y * y,
            z * z,
            2.0 * x * y,
            2.0 * x * z,
            2.0 * y * z,
            x,
            y,
            z,
            1.0,
        ]);
        normal += row * row.transpose();
    }
    let eig = normal.symmetric_eigen();
    let mut min_idx = 0;
    for i in 1..10 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let mut p = eig.eigenvectors.column(min_idx).into_owned();
    // orient so the quadratic form is positive (ellipsoid, not its negation)
    if p[0] + p[1] + p[2] < 0.0 {
        p = -p;
    }
    #[rustfmt::skip]
    let q = Matrix3::new(
        p[0], p[3], p[4],
        p[3], p[1], p[5],
        p[4], p[5], p[2],
    );
    let b = Vector3::new(p[6], p[7], p[8]);
    let c = p[9];

    let chol_q = q.cholesky().ok_or(Error::DegenerateQuadric {
        reason: "quadric is not positive definite",
    })?;
    let center = chol_q.solve(&(-0.5 * b));
    // scale factor linking the quadric to the unit-radius ellipsoid
    let k = (center.transpose() * q * center)[0] - c;
    if !(k > 0.0) {
        return Err(Error::DegenerateQuadric {
            reason: "fitted surface has no positive size",
        });
    }
    let shape_sq = chol_q.inverse() * k;
    let shape = shape_sq
        .cholesky()
        .ok_or(Error::DegenerateQuadric {
            reason: "fitted shape is not positive definite",
        })?
        .l();

    // direction coverage: unit vectors from the center must span 3-D
    let mut cov = Matrix3::zeros();
    for p in points {
        let u = (p - center).normalize();
        cov += u * u.transpose();
    }
    cov /= points.len() as f64;
    let min_eig = cov.symmetric_eigen().eigenvalues.min();
    if min_eig < ELLIPSOID_MIN_COVERAGE {
        return Err(Error::InsufficientExcitation {
            context: "ellipsoid direction coverage",
        });
    }
    Ok(EllipsoidFit { shape, center })
}

/// Output of the magnetometer-only intrinsic refinement.
#[derive(Clone, Debug)]
pub struct IntrinsicResult {
    /// Lower-triangular distortion factor with positive diagonal.
    pub shape: Matrix3<f64>,
    pub bias: Vector3<f64>,
    /// Per-sample field-direction angles (φ, γ) with
    /// v = (−sin γ, sin φ cos γ, cos φ cos γ).
    pub roll_pitch: Vec<(f64, f64)>,
    /// √(Σ‖residual‖² / (3·T)) over the fitted samples (µT).
    pub residual_rms: f64,
}

#[derive(Clone)]
struct IntrinsicPoint {
    /// Lower-triangular entries in the order
    /// (0,0), (1,0), (1,1), (2,0), (2,1), (2,2).
    shape6: [f64; 6],
    bias: Vector3<f64>,
    angles: Vec<(f64, f64)>,
}

fn shape_from_six(s: &[f64; 6]) -> Matrix3<f64> {
    #[rustfmt::skip]
    let m = Matrix3::new(
        s[0], 0.0,  0.0,
        s[1], s[2], 0.0,
        s[3], s[4], s[5],
    );
    m
}

fn six_from_shape(l: &Matrix3<f64>) -> [f64; 6] {
    [
        l[(0, 0)],
        l[(1, 0)],
        l[(1, 1)],
        l[(2, 0)],
        l[(2, 1)],
        l[(2, 2)],
    ]
}

fn direction(phi: f64, gamma: f64) -> Vector3<f64> {
    Vector3::new(-gamma.sin(), phi.sin() * gamma.cos(), phi.cos() * gamma.cos())
}

fn angles_from_direction(v: &Vector3<f64>) -> (f64, f64) {
    (v.y.atan2(v.z), (-v.x).clamp(-1.0, 1.0).asin())
}

const VAR_SHAPE: VarId = VarId::Theta { offset: 0, dim: 6 };
const VAR_CENTER: VarId = VarId::Theta { offset: 6, dim: 3 };

struct IntrinsicProblem<'a> {
    mags: &'a [Vector3<f64>],
}

impl ManifoldProblem for IntrinsicProblem<'_> {
    type Point = IntrinsicPoint;

    fn theta_dim(&self) -> usize {
        9
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn num_states(&self) -> usize {
        self.mags.len()
    }
    fn num_blocks(&self) -> usize {
        self.mags.len()
    }

    fn block(&self, idx: usize, pt: &IntrinsicPoint) -> Result<ResidualBlock> {
        let l = shape_from_six(&pt.shape6);
        let (phi, gamma) = pt.angles[idx];
        let v = direction(phi, gamma);
        let value = self.mags[idx] - l * v - pt.bias;

        let mut state = JacobianBlock::new(VarId::State(idx));
        let dv_dphi = Vector3::new(
            0.0,
            phi.cos() * gamma.cos(),
            -phi.sin() * gamma.cos(),
        );
        let dv_dgamma = Vector3::new(
            -gamma.cos(),
            -phi.sin() * gamma.sin(),
            -phi.cos() * gamma.sin(),
        );
        state.mat.set_column(0, &(-(l * dv_dphi)));
        state.mat.set_column(1, &(-(l * dv_dgamma)));

        let mut shape = JacobianBlock::new(VAR_SHAPE);
        // ∂(−L v)/∂L_ij = −e_i v_j, lower-triangular entries only
        for (col, &(i, j)) in [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)]
            .iter()
            .enumerate()
        {
            shape.mat[(i, col)] = -v[j];
        }
        let center = JacobianBlock::from_matrix3(VAR_CENTER, &(-Matrix3::identity()));

        let mut jacobians = arrayvec::ArrayVec::new();
        jacobians.push(state);
        jacobians.push(shape);
        jacobians.push(center);
        Ok(ResidualBlock { value, jacobians })
    }

    fn retract(&self, pt: &IntrinsicPoint, step: &StepView<'_>) -> IntrinsicPoint {
        let mut out = pt.clone();
        for k in 0..6 {
            out.shape6[k] += step.theta[k];
        }
        for k in 0..3 {
            out.bias[k] += step.theta[6 + k];
        }
        for (i, a) in out.angles.iter_mut().enumerate() {
            let d = step.state(i);
            a.0 += d[0];
            a.1 += d[1];
        }
        out
    }
}

/// Refine the ellipsoid seed by minimizing Σ‖m̃ − L·v(φ,γ) − o‖² jointly
/// over the lower-triangular `L`, the bias `o`, and one unit direction per
/// sample. The triangular constraint fixes the rotation gauge, so the
/// minimizer is unique up to sign flips, which are normalized away.
pub fn intrinsic_refine(
    points: &[Vector3<f64>],
    seed: &EllipsoidFit,
) -> Result<IntrinsicResult> {
    if points.len() < ELLIPSOID_MIN_POINTS {
        return Err(Error::TooFewSamples {
            context: "intrinsic refinement",
        });
    }
    let inv = seed
        .shape
        .try_inverse()
        .ok_or(Error::DegenerateQuadric {
            reason: "seed shape is singular",
        })?;
    let angles = points
        .iter()
        .map(|p| {
            let v = inv * (p - seed.center);
            let n = v.norm();
            if n > 0.0 {
                angles_from_direction(&(v / n))
            } else {
                (0.0, 0.0)
            }
        })
        .collect();
    let init = IntrinsicPoint {
        shape6: six_from_shape(&seed.shape),
        bias: seed.center,
        angles,
    };
    let problem = IntrinsicProblem { mags: points };
    let (mut point, _report) = levenberg_marquardt(
        &problem,
        init,
        &FreezeMask::none(9),
        &LmConfig::default(),
    )?;

    // normalize the sign gauge: L → L·S, v → S·v with S = diag(±1)
    let mut l = shape_from_six(&point.shape6);
    let flips = Vector3::new(
        if l[(0, 0)] < 0.0 { -1.0 } else { 1.0 },
        if l[(1, 1)] < 0.0 { -1.0 } else { 1.0 },
        if l[(2, 2)] < 0.0 { -1.0 } else { 1.0 },
    );
    if flips != Vector3::new(1.0, 1.0, 1.0) {
        for j in 0..3 {
            let col = l.column(j) * flips[j];
            l.set_column(j, &col);
        }
        for a in point.angles.iter_mut() {
            let v = direction(a.0, a.1).component_mul(&flips);
            *a = angles_from_direction(&v);
        }
        point.shape6 = six_from_shape(&l);
    }

    let cost = evaluate_cost(&problem, &point)?;
    Ok(IntrinsicResult {
        shape: l,
        bias: point.bias,
        roll_pitch: point.angles,
        residual_rms: (cost / (3.0 * points.len() as f64)).sqrt(),
    })
}

/// Recover the alignment rotation `R` completing `D = L·R` from the
/// kinematic consistency of magnetometer and gyro.
///
/// With ĥ = L⁻¹(m̃ − o) the intrinsic-corrected field direction and ω the
/// bias-corrected body rate, rigid attachment implies ĥ̇ = ĥ × (R ω). Each
/// interior keyframe contributes the linear rows
/// `central_difference(ĥ) = [ĥ]ₓ R ω` in the nine entries of `R`; the
/// least-squares solution is projected onto SO(3) by SVD. A second pass
/// drops rows whose residual exceeds five times the median — those come
/// from motion discontinuities — and re-solves.
pub fn extrinsic_align(
    dataset: &Dataset,
    shape: &Matrix3<f64>,
    mag_bias: &Vector3<f64>,
    gyro_bias: &Vector3<f64>,
) -> Result<Rotation3<f64>> {
    let inv = shape.try_inverse().ok_or(Error::DegenerateQuadric {
        reason: "intrinsic shape is singular",
    })?;
    let keyframes: Vec<usize> = dataset.keyframes().collect();
    if keyframes.len() < 3 {
        return Err(Error::TooFewSamples {
            context: "extrinsic alignment",
        });
    }
    let h: Vec<Vector3<f64>> = keyframes
        .iter()
        .map(|&k| {
            inv * (dataset.mag[k].expect("keyframe has magnetometer sample") - mag_bias)
        })
        .collect();
    let spacing = dataset.rate_ratio as f64 * dataset.dt;

    struct Row {
        a: SMatrix<f64, 3, 9>,
        rhs: Vector3<f64>,
    }
    let rows: Vec<Row> = (1..keyframes.len() - 1)
        .map(|j| {
            let hdot = (h[j + 1] - h[j - 1]) / (2.0 * spacing);
            let omega = dataset.gyro[keyframes[j]] - gyro_bias;
            let hx = so3::hat(&h[j]);
            let mut a = SMatrix::<f64, 3, 9>::zeros();
            for c in 0..3 {
                // vec(R) is column-major: block c multiplies column c of R
                a.fixed_view_mut::<3, 3>(0, 3 * c)
                    .copy_from(&(hx * omega[c]));
            }
            Row { a, rhs: hdot }
        })
        .collect();

    let solve = |rows: &[Row]| -> Result<Rotation3<f64>> {
        let mut normal = SMatrix::<f64, 9, 9>::zeros();
        let mut rhs = SVector::<f64, 9>::zeros();
        for r in rows {
            normal += r.a.transpose() * r.a;
            rhs += r.a.transpose() * r.rhs;
        }
        let min_eig = normal.symmetric_eigen().eigenvalues.min();
        if min_eig < ALIGNMENT_MIN_EXCITATION * rows.len() as f64 {
            return Err(Error::InsufficientExcitation {
                context: "extrinsic alignment (need rotation about 3 axes)",
            });
        }
        let x = normal
            .cholesky()
            .ok_or(Error::InsufficientExcitation {
                context: "extrinsic alignment normal equations",
            })?
            .solve(&rhs);
        let m = Matrix3::from_column_slice(x.as_slice());
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd with u");
        let vt = svd.v_t.expect("svd with vt");
        let det = (u * vt).determinant();
        Ok(Rotation3::from_matrix_unchecked(
            u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum())) * vt,
        ))
    };

    let first = solve(&rows)?;
    // trim pass: drop gross outliers (segment boundaries, glitches)
    let mut residuals: Vec<f64> = rows
        .iter()
        .map(|r| (r.rhs - r.a * vec9(first.matrix())).norm())
        .collect();
    let mut sorted = residuals.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = sorted[sorted.len() / 2];
    if !(median > 0.0) {
        return Ok(first);
    }
    let kept: Vec<Row> = rows
        .into_iter()
        .zip(residuals.drain(..))
        .filter(|(_, r)| *r <= ALIGNMENT_TRIM_FACTOR * median)
        .map(|(row, _)| row)
        .collect();
    if kept.len() < 10 {
        return Ok(first);
    }
    solve(&kept)
}

fn vec9(m: &Matrix3<f64>) -> SVector<f64, 9> {
    SVector::<f64, 9>::from_column_slice(m.as_slice())
}

/// Everything the joint solver needs to start.
#[derive(Clone, Debug)]
pub struct InitBundle {
    pub params0: CalibrationParams,
    /// One orientation seed per keyframe.
    pub trajectory0: Vec<Rotation3<f64>>,
    /// Sample range used for the gyro-bias estimate.
    pub stationary_span: std::ops::Range<usize>,
    /// Magnetometer fit quality after intrinsic refinement (µT).
    pub intrinsic_rms: f64,
}

/// Run the full pipeline on one dataset.
///
/// The accelerometer bias starts at zero (it is strongly observable in the
/// joint problem) and the dip angle starts at the configured survey value.
pub fn build_init(
    dataset: &Dataset,
    noise: &NoiseConfig,
    cfg: &InitConfig,
) -> Result<InitBundle> {
    dataset.validate()?;
    noise.validate()?;
    let (gyro_bias, stationary_span) = estimate_gyro_bias(dataset, noise, cfg)?;
    let full = dead_reckon(dataset, &gyro_bias);
    let trajectory0: Vec<Rotation3<f64>> =
        dataset.keyframes().map(|k| full[k]).collect();

    let mags: Vec<Vector3<f64>> = dataset.mag.iter().flatten().copied().collect();
    let fit = ellipsoid_fit(&mags)?;
    let intrinsic = intrinsic_refine(&mags, &fit)?;
    let alignment = extrinsic_align(dataset, &intrinsic.shape, &intrinsic.bias, &gyro_bias)?;

    let params0 = CalibrationParams {
        accel_bias: Vector3::zeros(),
        gyro_bias,
        distortion: intrinsic.shape * alignment.matrix(),
        mag_bias: intrinsic.bias,
        dip_angle: cfg.dip_angle_deg.to_radians(),
    };
    params0.validate()?;
    Ok(InitBundle {
        params0,
        trajectory0,
        stationary_span,
        intrinsic_rms: intrinsic.residual_rms,
    })
}
