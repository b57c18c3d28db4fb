//! Estimation-error metrics.
//!
//! Errors are grouped the way the parameters are estimated and reported:
//! the three bias vectors, the full distortion matrix, and the dip angle.
//! A group's scalar error is the Euclidean (Frobenius) norm of its
//! component-wise error; batch RMSE is the root mean square of those
//! scalars over repeated runs.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::models::CalibrationParams;

/// Component-wise absolute errors of one estimate against the truth.
#[derive(Clone, Debug)]
pub struct ParamErrors {
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub mag_bias: Vector3<f64>,
    /// Frobenius norm of the distortion-matrix error.
    pub distortion_frobenius: f64,
    /// Absolute dip-angle error (rad).
    pub dip_rad: f64,
}

impl ParamErrors {
    pub fn between(estimate: &CalibrationParams, truth: &CalibrationParams) -> Self {
        Self {
            accel_bias: (estimate.accel_bias - truth.accel_bias).abs(),
            gyro_bias: (estimate.gyro_bias - truth.gyro_bias).abs(),
            mag_bias: (estimate.mag_bias - truth.mag_bias).abs(),
            distortion_frobenius: (estimate.distortion - truth.distortion).norm(),
            dip_rad: (estimate.dip_angle - truth.dip_angle).abs(),
        }
    }

    pub fn group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::AccelBias => self.accel_bias.norm(),
            ParamGroup::GyroBias => self.gyro_bias.norm(),
            ParamGroup::Distortion => self.distortion_frobenius,
            ParamGroup::MagBias => self.mag_bias.norm(),
            ParamGroup::Dip => self.dip_rad,
        }
    }
}

/// The five reported parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    AccelBias,
    GyroBias,
    Distortion,
    MagBias,
    Dip,
}

pub const ALL_GROUPS: [ParamGroup; 5] = [
    ParamGroup::AccelBias,
    ParamGroup::GyroBias,
    ParamGroup::Distortion,
    ParamGroup::MagBias,
    ParamGroup::Dip,
];

/// Root-mean-square group errors over a batch of runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupRmse {
    pub accel_bias: f64,
    pub gyro_bias: f64,
    pub distortion: f64,
    pub mag_bias: f64,
    pub dip: f64,
}

impl GroupRmse {
    pub fn group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::AccelBias => self.accel_bias,
            ParamGroup::GyroBias => self.gyro_bias,
            ParamGroup::Distortion => self.distortion,
            ParamGroup::MagBias => self.mag_bias,
            ParamGroup::Dip => self.dip,
        }
    }
}

/// RMSE of each group's scalar error over `errors`. An empty batch gives
/// all zeros (callers are expected to gate on run counts themselves).
pub fn rmse(errors: &[ParamErrors]) -> GroupRmse {
    if errors.is_empty() {
        return GroupRmse::default();
    }
    let n = errors.len() as f64;
    let mean_sq = |g: ParamGroup| {
        (errors.iter().map(|e| e.group(g).powi(2)).sum::<f64>() / n).sqrt()
    };
    GroupRmse {
        accel_bias: mean_sq(ParamGroup::AccelBias),
        gyro_bias: mean_sq(ParamGroup::GyroBias),
        distortion: mean_sq(ParamGroup::Distortion),
        mag_bias: mean_sq(ParamGroup::MagBias),
        dip: mean_sq(ParamGroup::Dip),
    }
}
