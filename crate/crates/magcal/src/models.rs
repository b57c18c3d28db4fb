//! Measurement models, the calibration parameter set, and the dataset
//! container shared by the simulator, the batch estimator, and the filters.
//!
//! Model conventions (navigation frame: z down along gravity):
//!
//! ```text
//! gravity      g = (0, 0, g₀)
//! field        m(α) = (0, cos α, −sin α)          unit norm, dip angle α
//! accelerometer  s = −Rᵀ g + o_a + noise
//! magnetometer   y = D Rᵀ m(α) + o_m + noise
//! gyroscope      R⁺ = R · Exp((ũ − o_ω) Δt)
//! ```
//!
//! All angles are radians, rates rad/s, accelerations m/s², magnetic
//! quantities in the magnetometer's raw units (µT here).

use nalgebra::{Matrix3, Rotation3, SVector, Vector3};

use crate::error::{Error, Result};
use crate::so3;

/// Default gravity magnitude (m/s²).
pub const GRAVITY_DEFAULT: f64 = 9.81;

/// Dimension of the sensor-parameter vector θ.
pub const THETA_DIM: usize = 19;

/// Orientation trajectory, one rotation per epoch.
pub type RotationTrajectory = Vec<Rotation3<f64>>;

/// The full sensor-parameter set θ estimated by every method in this crate.
///
/// The tangent/vector ordering used by the solver, the filters, and
/// serialization is: accelerometer bias (3), gyroscope bias (3), distortion
/// matrix in column-major order (9), magnetometer bias (3), dip angle (1).
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationParams {
    /// Accelerometer bias o_a (m/s²).
    pub accel_bias: Vector3<f64>,
    /// Gyroscope bias o_ω (rad/s).
    pub gyro_bias: Vector3<f64>,
    /// Magnetometer distortion D (soft iron, scale, axis alignment).
    pub distortion: Matrix3<f64>,
    /// Magnetometer bias o_m (hard iron, µT).
    pub mag_bias: Vector3<f64>,
    /// Local magnetic dip angle α (rad).
    pub dip_angle: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            distortion: Matrix3::identity(),
            mag_bias: Vector3::zeros(),
            dip_angle: 0.0,
        }
    }
}

impl CalibrationParams {
    /// Additive update `θ ⊕ δ` in the canonical 19-dim ordering.
    pub fn retract(&self, step: &[f64]) -> Self {
        assert_eq!(step.len(), THETA_DIM);
        let mut out = self.clone();
        for i in 0..3 {
            out.accel_bias[i] += step[i];
            out.gyro_bias[i] += step[3 + i];
            out.mag_bias[i] += step[15 + i];
        }
        // distortion block is vec(D) in column-major order
        for c in 0..3 {
            for r in 0..3 {
                out.distortion[(r, c)] += step[6 + 3 * c + r];
            }
        }
        out.dip_angle += step[18];
        out
    }

    /// Flatten to the canonical 19-dim ordering.
    pub fn to_vector(&self) -> SVector<f64, THETA_DIM> {
        let mut v = SVector::<f64, THETA_DIM>::zeros();
        for i in 0..3 {
            v[i] = self.accel_bias[i];
            v[3 + i] = self.gyro_bias[i];
            v[15 + i] = self.mag_bias[i];
        }
        for c in 0..3 {
            for r in 0..3 {
                v[6 + 3 * c + r] = self.distortion[(r, c)];
            }
        }
        v[18] = self.dip_angle;
        v
    }

    /// Inverse of [`CalibrationParams::to_vector`].
    pub fn from_vector(v: &SVector<f64, THETA_DIM>) -> Self {
        let mut p = Self::default();
        for i in 0..3 {
            p.accel_bias[i] = v[i];
            p.gyro_bias[i] = v[3 + i];
            p.mag_bias[i] = v[15 + i];
        }
        for c in 0..3 {
            for r in 0..3 {
                p.distortion[(r, c)] = v[6 + 3 * c + r];
            }
        }
        p.dip_angle = v[18];
        p
    }

    /// Sanity bounds: the distortion must be comfortably invertible and the
    /// dip angle physically meaningful.
    pub fn validate(&self) -> Result<()> {
        let v = self.to_vector();
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                context: "calibration parameters",
            });
        }
        let svd = self.distortion.svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if smin <= 0.0 || smax / smin >= 1e3 {
            return Err(Error::Config(format!(
                "distortion matrix condition number {:.3e} exceeds 1e3",
                if smin > 0.0 { smax / smin } else { f64::INFINITY }
            )));
        }
        if self.dip_angle.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::Config(format!(
                "dip angle {} rad outside (−π/2, π/2)",
                self.dip_angle
            )));
        }
        Ok(())
    }
}

/// Interpretable factorization of the distortion matrix:
/// `D = diag(scales) · S(skew) · R_align`.
#[derive(Clone, Debug)]
pub struct DistortionFactors {
    /// Per-axis scale factors (diagonal of D_diag).
    pub scales: Vector3<f64>,
    /// Skew angles (ζ, η, ρ), radians.
    pub skew: Vector3<f64>,
    /// Rotation aligning the magnetometer axes with the inertial axes.
    pub alignment: Rotation3<f64>,
}

/// Compose the distortion matrix from its factors:
///
/// ```text
///            ⎡ 1       0              0       ⎤
/// S(ζ,η,ρ) = ⎢ sin ζ   cos ζ          0       ⎥
///            ⎣ −sin η  cos η sin ρ   cos η cos ρ ⎦
/// ```
pub fn compose_distortion(f: &DistortionFactors) -> Matrix3<f64> {
    let (z, e, r) = (f.skew.x, f.skew.y, f.skew.z);
    #[rustfmt::skip]
    let skew = Matrix3::new(
        1.0,      0.0,               0.0,
        z.sin(),  z.cos(),           0.0,
        -e.sin(), e.cos() * r.sin(), e.cos() * r.cos(),
    );
    Matrix3::from_diagonal(&f.scales) * skew * f.alignment.matrix()
}

/// Navigation-frame reference vectors.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceField {
    /// Gravity magnitude g₀ (m/s²).
    pub gravity: f64,
}

impl Default for ReferenceField {
    fn default() -> Self {
        Self {
            gravity: GRAVITY_DEFAULT,
        }
    }
}

impl ReferenceField {
    /// Gravity in the navigation frame, `(0, 0, g₀)` (z down).
    pub fn gravity_nav(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.gravity)
    }

    /// Unit magnetic field in the navigation frame for dip angle `alpha`:
    /// `(0, cos α, −sin α)`.
    pub fn mag_nav(&self, alpha: f64) -> Vector3<f64> {
        Vector3::new(0.0, alpha.cos(), -alpha.sin())
    }
}

/// Per-sample measurement noise standard deviations (isotropic per sensor).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseConfig {
    /// Accelerometer noise std per sample (m/s²).
    pub sigma_accel: f64,
    /// Gyroscope noise std per sample (rad/s).
    pub sigma_gyro: f64,
    /// Magnetometer noise std per sample (µT).
    pub sigma_mag: f64,
}

impl NoiseConfig {
    /// Convert continuous-time noise densities (per √Hz; gyro in rad/s/√Hz)
    /// to per-sample standard deviations, evaluating each stream at its own
    /// effective sampling rate: `σ = density · √rate`. The gyroscope runs at
    /// the full inertial rate `rate_hz`. The magnetometer and accelerometer
    /// streams the estimator consumes live at the keyframe rate
    /// `rate_hz / rate_ratio` — a magnetometer that samples slower, and an
    /// accelerometer decimated to match it, both integrate over the longer
    /// interval, so their per-sample deviations shrink as the ratio grows
    /// while each stream's total information stays fixed.
    pub fn from_densities(accel: f64, gyro: f64, mag: f64, rate_hz: f64, rate_ratio: usize) -> Self {
        let keyframe_rate = rate_hz / rate_ratio as f64;
        Self {
            sigma_accel: accel * keyframe_rate.sqrt(),
            sigma_gyro: gyro * rate_hz.sqrt(),
            sigma_mag: mag * keyframe_rate.sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_accel > 0.0 && self.sigma_gyro > 0.0 && self.sigma_mag > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(
                "noise standard deviations must be positive".into(),
            ))
        }
    }

    pub fn cov_accel(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal_element(self.sigma_accel * self.sigma_accel)
    }

    pub fn cov_gyro(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal_element(self.sigma_gyro * self.sigma_gyro)
    }

    pub fn cov_mag(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal_element(self.sigma_mag * self.sigma_mag)
    }
}

/// A time-aligned recording: gyroscope and accelerometer at the IMU rate,
/// magnetometer present every `rate_ratio`-th sample (a *keyframe*).
///
/// Sample `k` is taken at `t = k·dt`. Gyro sample `k` drives the transition
/// from epoch `k` to `k+1`, so the final gyro sample has no successor state
/// and does not enter the estimation cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Sample spacing (s).
    pub dt: f64,
    /// IMU-rate to magnetometer-rate ratio N (1 = magnetometer at full rate).
    pub rate_ratio: usize,
    pub gyro: Vec<Vector3<f64>>,
    pub accel: Vec<Vector3<f64>>,
    /// `Some` exactly at keyframes (`k % rate_ratio == 0`).
    pub mag: Vec<Option<Vector3<f64>>>,
}

impl Dataset {
    /// Number of samples T.
    pub fn len(&self) -> usize {
        self.gyro.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gyro.is_empty()
    }

    /// Keyframe sample indices: `0, N, 2N, …` below `len()`.
    pub fn keyframes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).step_by(self.rate_ratio.max(1))
    }

    pub fn num_keyframes(&self) -> usize {
        self.len().div_ceil(self.rate_ratio.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.gyro.is_empty() {
            return Err(Error::TooFewSamples { context: "dataset" });
        }
        if self.gyro.len() != self.accel.len() || self.gyro.len() != self.mag.len() {
            return Err(Error::Format(format!(
                "stream lengths disagree: gyro {}, accel {}, mag {}",
                self.gyro.len(),
                self.accel.len(),
                self.mag.len()
            )));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Format(format!("invalid sample spacing {}", self.dt)));
        }
        if self.rate_ratio == 0 {
            return Err(Error::Format("rate ratio must be at least 1".into()));
        }
        for (k, ((g, a), m)) in self
            .gyro
            .iter()
            .zip(&self.accel)
            .zip(&self.mag)
            .enumerate()
        {
            let mag_finite = m.map_or(true, |v| v.iter().all(|x| x.is_finite()));
            if !(g.iter().all(|x| x.is_finite()) && a.iter().all(|x| x.is_finite()) && mag_finite)
            {
                return Err(Error::NonFinite {
                    context: "dataset sample",
                });
            }
            if m.is_some() != (k % self.rate_ratio == 0) {
                return Err(Error::InconsistentRatio {
                    ratio: self.rate_ratio,
                });
            }
        }
        Ok(())
    }

    /// Decimate the magnetometer stream by `factor`, multiplying the rate
    /// ratio. Gyro and accelerometer streams are untouched.
    pub fn downsample(&self, factor: usize) -> Result<Dataset> {
        if factor == 0 {
            return Err(Error::Config("downsample factor must be at least 1".into()));
        }
        let ratio = self.rate_ratio * factor;
        let mag = self
            .mag
            .iter()
            .enumerate()
            .map(|(k, m)| if k % ratio == 0 { *m } else { None })
            .collect();
        Ok(Dataset {
            rate_ratio: ratio,
            mag,
            ..self.clone()
        })
    }
}

/// One gyroscope propagation step: `R⁺ = R · Exp((ũ − o_ω) Δt)`.
pub fn propagate(
    r: &Rotation3<f64>,
    gyro: &Vector3<f64>,
    gyro_bias: &Vector3<f64>,
    dt: f64,
) -> Rotation3<f64> {
    r * so3::exp_map(&((gyro - gyro_bias) * dt))
}

/// Noise-free accelerometer measurement `−Rᵀ g + o_a`.
pub fn accel_model(
    r: &Rotation3<f64>,
    params: &CalibrationParams,
    field: &ReferenceField,
) -> Vector3<f64> {
    -(r.inverse() * field.gravity_nav()) + params.accel_bias
}

/// Noise-free magnetometer measurement `D Rᵀ m(α) + o_m`.
pub fn mag_model(
    r: &Rotation3<f64>,
    params: &CalibrationParams,
    field: &ReferenceField,
) -> Vector3<f64> {
    params.distortion * (r.inverse() * field.mag_nav(params.dip_angle)) + params.mag_bias
}

/// Log density of the orientation transition `R_{k+1} | R_k` under the gyro
/// model, expressed through the equivalent rate discrepancy
/// `δu = ũ − Log(RᵀR⁺)/Δt − o_ω`:
///
/// ```text
/// log p = −½ δuᵀ Σ_ω⁻¹ δu − ½ ln((2π)³ det Σ_ω)
/// ```
pub fn transition_log_density(
    r_k: &Rotation3<f64>,
    r_next: &Rotation3<f64>,
    gyro: &Vector3<f64>,
    params: &CalibrationParams,
    noise: &NoiseConfig,
    dt: f64,
) -> f64 {
    let phi = so3::log_map(&(r_k.inverse() * r_next));
    let du = gyro - phi / dt - params.gyro_bias;
    let s2 = noise.sigma_gyro * noise.sigma_gyro;
    let quad = du.norm_squared() / s2;
    let logdet = 3.0 * (2.0 * std::f64::consts::PI * s2).ln();
    -0.5 * (quad + logdet)
}
