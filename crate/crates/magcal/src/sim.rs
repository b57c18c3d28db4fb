//! Monte Carlo dataset generator.
//!
//! Reproduces the benchmark protocol used throughout this crate: calibration
//! parameters drawn from fixed uniform ranges, a rotation trajectory that
//! holds still for a lead-in and then turns about six nearly-fixed axes at a
//! nearly-constant rate, and sensor streams synthesized from the measurement
//! models with per-sample Gaussian noise.
//!
//! Reproducibility: every random quantity comes from one of five
//! counter-derived streams (parameters, trajectory, gyro/accel/mag noise),
//! each seeded by mixing the user seed with a stream id. Changing the rate
//! ratio or noise settings therefore never perturbs the parameter draw.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    compose_distortion, CalibrationParams, Dataset, DistortionFactors, NoiseConfig,
    ReferenceField, RotationTrajectory,
};
use crate::so3;

/// Continuous-time noise densities (per √Hz): accel m/s², gyro rad/s, mag µT.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseDensities {
    pub accel: f64,
    pub gyro: f64,
    pub mag: f64,
}

impl Default for NoiseDensities {
    /// The benchmark's noise settings: 0.02 (m/s²)/√Hz accelerometer,
    /// 0.05 (°/s)/√Hz gyroscope, 0.003 µT/√Hz magnetometer.
    fn default() -> Self {
        Self {
            accel: 0.02,
            gyro: 0.05_f64.to_radians(),
            mag: 0.003,
        }
    }
}

impl NoiseDensities {
    /// Noise-free generation.
    pub fn zero() -> Self {
        Self {
            accel: 0.0,
            gyro: 0.0,
            mag: 0.0,
        }
    }

    /// Per-sample standard deviations with the gyroscope at `rate_hz` and the
    /// magnetometer/accelerometer streams at the keyframe rate
    /// `rate_hz / rate_ratio` (see [`NoiseConfig::from_densities`]).
    pub fn sigmas(&self, rate_hz: f64, rate_ratio: usize) -> NoiseConfig {
        NoiseConfig::from_densities(self.accel, self.gyro, self.mag, rate_hz, rate_ratio)
    }

    /// Per-sample standard deviations usable for estimation weighting: any
    /// zero density is replaced by the benchmark default, so noiseless
    /// datasets still get finite whitening.
    pub fn whitening_sigmas(&self, rate_hz: f64, rate_ratio: usize) -> NoiseConfig {
        let d = NoiseDensities::default();
        NoiseConfig::from_densities(
            if self.accel > 0.0 { self.accel } else { d.accel },
            if self.gyro > 0.0 { self.gyro } else { d.gyro },
            if self.mag > 0.0 { self.mag } else { d.mag },
            rate_hz,
            rate_ratio,
        )
    }
}

/// Pins selected ground-truth quantities instead of drawing them.
#[derive(Clone, Debug, Default)]
pub struct Table1Overrides {
    pub factors: Option<DistortionFactors>,
    pub accel_bias: Option<Vector3<f64>>,
    pub gyro_bias: Option<Vector3<f64>>,
    pub mag_bias: Option<Vector3<f64>>,
    pub dip_angle_rad: Option<f64>,
}

/// Generation settings.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub seed: u64,
    /// IMU sample rate (Hz).
    pub rate_hz: f64,
    /// IMU-to-magnetometer rate ratio N ≥ 1.
    pub rate_ratio: usize,
    /// Motion duration, excluding the stationary lead-in (s).
    pub duration_s: f64,
    /// Number of rotation segments.
    pub num_axes: usize,
    /// Nominal angular rate (°/s).
    pub angular_rate_dps: f64,
    /// Stationary lead-in (s) used for gyro-bias initialization.
    pub stationary_lead_s: f64,
    pub densities: NoiseDensities,
    pub overrides: Option<Table1Overrides>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rate_hz: 80.0,
            rate_ratio: 1,
            duration_s: 300.0,
            num_axes: 6,
            angular_rate_dps: 7.0,
            stationary_lead_s: 2.0,
            densities: NoiseDensities::default(),
            overrides: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0 && self.duration_s > 0.0 && self.stationary_lead_s >= 0.0) {
            return Err(Error::Config(
                "simulation needs positive rate and duration".into(),
            ));
        }
        if self.rate_ratio == 0 || self.num_axes == 0 {
            return Err(Error::Config(
                "rate ratio and axis count must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Everything the generator knows that an estimator must recover.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub params: CalibrationParams,
    pub factors: DistortionFactors,
    /// One rotation per IMU sample (body → navigation).
    pub trajectory: RotationTrajectory,
    /// True angular rate at each sample (rad/s, body frame).
    pub rates: Vec<Vector3<f64>>,
}

/// A generated dataset with its ground truth and whitening noise levels.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub dataset: Dataset,
    pub truth: GroundTruth,
    /// Per-sample σ for estimation weighting (zero densities replaced by
    /// defaults; see [`NoiseDensities::whitening_sigmas`]).
    pub noise: NoiseConfig,
    pub rate_hz: f64,
}

/// RNG stream ids. Every stream is independently derived from the seed.
const STREAM_PARAMS: u64 = 0;
const STREAM_TRAJECTORY: u64 = 1;
const STREAM_GYRO_NOISE: u64 = 2;
const STREAM_ACCEL_NOISE: u64 = 3;
const STREAM_MAG_NOISE: u64 = 4;

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    // splitmix64-style finalizer over (seed, stream)
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha12Rng::seed_from_u64(z ^ (z >> 31))
}

/// Draw one ground-truth parameter set from the benchmark ranges:
/// scales U(0.9, 1.1), skew angles U(±10°), alignment Euler angles U(±5°),
/// o_a U(±0.5) m/s², o_ω U(0.47, 0.67) °/s, o_m U(±2) µT, α U(67°, 77°).
pub fn sample_params(
    rng: &mut impl Rng,
    overrides: Option<&Table1Overrides>,
) -> (CalibrationParams, DistortionFactors) {
    // fixed draw order; overrides replace values after drawing so the
    // stream position stays identical either way
    let scales = Vector3::new(
        rng.random_range(0.9..1.1),
        rng.random_range(0.9..1.1),
        rng.random_range(0.9..1.1),
    );
    let skew_lim = 10.0_f64.to_radians();
    let skew = Vector3::new(
        rng.random_range(-skew_lim..skew_lim),
        rng.random_range(-skew_lim..skew_lim),
        rng.random_range(-skew_lim..skew_lim),
    );
    let euler_lim = 5.0_f64.to_radians();
    let alignment = Rotation3::from_euler_angles(
        rng.random_range(-euler_lim..euler_lim),
        rng.random_range(-euler_lim..euler_lim),
        rng.random_range(-euler_lim..euler_lim),
    );
    let accel_bias = Vector3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    );
    let (glo, ghi) = (0.47_f64.to_radians(), 0.67_f64.to_radians());
    let gyro_bias = Vector3::new(
        rng.random_range(glo..ghi),
        rng.random_range(glo..ghi),
        rng.random_range(glo..ghi),
    );
    let mag_bias = Vector3::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    );
    let dip = rng.random_range(67.0_f64.to_radians()..77.0_f64.to_radians());

    let mut factors = DistortionFactors {
        scales,
        skew,
        alignment,
    };
    let mut params = CalibrationParams {
        accel_bias,
        gyro_bias,
        mag_bias,
        dip_angle: dip,
        ..Default::default()
    };
    if let Some(o) = overrides {
        if let Some(f) = &o.factors {
            factors = f.clone();
        }
        if let Some(v) = o.accel_bias {
            params.accel_bias = v;
        }
        if let Some(v) = o.gyro_bias {
            params.gyro_bias = v;
        }
        if let Some(v) = o.mag_bias {
            params.mag_bias = v;
        }
        if let Some(v) = o.dip_angle_rad {
            params.dip_angle = v;
        }
    }
    params.distortion = compose_distortion(&factors);
    (params, factors)
}

/// Generate the rotation trajectory and the true angular-rate sequence.
///
/// Stationary lead-in, then the motion window split evenly across
/// `num_axes` segments. Segment axes cycle through
/// `+x, −x, +y, −y, +z, (1,1,1)/√3`, each perturbed by a U(±3°) direction
/// jitter; segment rates are the nominal rate with ±10% jitter. Within a
/// segment the angular velocity is constant, so the integration is exact.
pub fn generate_trajectory(
    cfg: &SimConfig,
    rng: &mut impl Rng,
) -> (RotationTrajectory, Vec<Vector3<f64>>) {
    let total = (cfg.rate_hz * (cfg.duration_s + cfg.stationary_lead_s)).round() as usize;
    let lead = (cfg.rate_hz * cfg.stationary_lead_s).round() as usize;
    let dt = 1.0 / cfg.rate_hz;

    let base_axes = [
        Vector3::x(),
        -Vector3::x(),
        Vector3::y(),
        -Vector3::y(),
        Vector3::z(),
        Vector3::new(1.0, 1.0, 1.0) / 3.0_f64.sqrt(),
    ];
    let motion = total.saturating_sub(lead);
    let seg_len = motion / cfg.num_axes;
    let jitter_lim = 3.0_f64.to_radians();

    let mut rates = vec![Vector3::zeros(); total];
    let mut k = lead;
    for seg in 0..cfg.num_axes {
        let jitter = Vector3::new(
            rng.random_range(-jitter_lim..jitter_lim),
            rng.random_range(-jitter_lim..jitter_lim),
            rng.random_range(-jitter_lim..jitter_lim),
        );
        let axis = so3::exp_map(&jitter) * base_axes[seg % base_axes.len()];
        let rate =
            cfg.angular_rate_dps.to_radians() * (1.0 + rng.random_range(-0.1..0.1));
        // the final segment absorbs the division remainder
        let end = if seg + 1 == cfg.num_axes {
            total
        } else {
            k + seg_len
        };
        for r in &mut rates[k..end] {
            *r = axis * rate;
        }
        k = end;
    }

    let mut trajectory = Vec::with_capacity(total);
    let mut r = Rotation3::identity();
    trajectory.push(r);
    for (i, u) in rates.iter().take(total.saturating_sub(1)).enumerate() {
        r *= so3::exp_map(&(u * dt));
        if (i + 1) % so3::ORTHONORMALIZE_EVERY == 0 {
            r = so3::orthonormalize(&r);
        }
        trajectory.push(r);
    }
    (trajectory, rates)
}

fn noise_samples(rng: &mut impl Rng, sigma: f64, n: usize) -> Vec<Vector3<f64>> {
    if sigma == 0.0 {
        return vec![Vector3::zeros(); n];
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    (0..n)
        .map(|_| {
            Vector3::new(
                normal.sample(rng),
                normal.sample(rng),
                normal.sample(rng),
            )
        })
        .collect()
}

/// Synthesize the measurement streams for a known trajectory and parameter
/// set. Magnetometer samples are emitted only at keyframes
/// (`k % rate_ratio == 0`).
pub fn synthesize_measurements(
    truth: &GroundTruth,
    sigmas: &NoiseConfig,
    cfg: &SimConfig,
    gyro_rng: &mut impl Rng,
    accel_rng: &mut impl Rng,
    mag_rng: &mut impl Rng,
) -> Dataset {
    let field = ReferenceField::default();
    let t = truth.trajectory.len();
    let p = &truth.params;

    let gyro_noise = noise_samples(gyro_rng, sigmas.sigma_gyro, t);
    let accel_noise = noise_samples(accel_rng, sigmas.sigma_accel, t);
    let keyframe_count = t.div_ceil(cfg.rate_ratio);
    let mag_noise = noise_samples(mag_rng, sigmas.sigma_mag, keyframe_count);

    let gyro = truth
        .rates
        .iter()
        .zip(&gyro_noise)
        .map(|(u, n)| u + p.gyro_bias + n)
        .collect();
    let accel = truth
        .trajectory
        .iter()
        .zip(&accel_noise)
        .map(|(r, n)| crate::models::accel_model(r, p, &field) + n)
        .collect();
    let mag = (0..t)
        .map(|k| {
            (k % cfg.rate_ratio == 0).then(|| {
                crate::models::mag_model(&truth.trajectory[k], p, &field)
                    + mag_noise[k / cfg.rate_ratio]
            })
        })
        .collect();

    Dataset {
        dt: 1.0 / cfg.rate_hz,
        rate_ratio: cfg.rate_ratio,
        gyro,
        accel,
        mag,
    }
}

/// Generate one complete dataset with ground truth.
pub fn simulate(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let (params, factors) =
        sample_params(&mut stream_rng(cfg.seed, STREAM_PARAMS), cfg.overrides.as_ref());
    let (trajectory, rates) =
        generate_trajectory(cfg, &mut stream_rng(cfg.seed, STREAM_TRAJECTORY));
    let truth = GroundTruth {
        params,
        factors,
        trajectory,
        rates,
    };
    let sigmas = cfg.densities.sigmas(cfg.rate_hz, cfg.rate_ratio);
    let dataset = synthesize_measurements(
        &truth,
        &sigmas,
        cfg,
        &mut stream_rng(cfg.seed, STREAM_GYRO_NOISE),
        &mut stream_rng(cfg.seed, STREAM_ACCEL_NOISE),
        &mut stream_rng(cfg.seed, STREAM_MAG_NOISE),
    );
    Ok(SimOutput {
        dataset,
        truth,
        noise: cfg.densities.whitening_sigmas(cfg.rate_hz, cfg.rate_ratio),
        rate_hz: cfg.rate_hz,
    })
}
