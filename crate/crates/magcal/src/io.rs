//! Dataset and report files.
//!
//! Datasets are CSV with the fixed header `t,gx,gy,gz,ax,ay,az,mx,my,mz`;
//! magnetometer columns are empty on rows between keyframes. Floats are
//! written with Rust's shortest-roundtrip formatting, so write→read
//! reproduces every sample bit for bit. Each dataset carries a sidecar
//! `<stem>.meta.json` holding the sample rate, the rate ratio, a SHA-256
//! digest of the CSV bytes, and (for synthetic data) the ground-truth
//! parameters.
//!
//! Calibration results are JSON reports that embed the digest of the
//! dataset they were computed from, so downstream evaluation can refuse
//! mismatched pairs.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{CalibrationParams, Dataset};

/// Fixed CSV column layout.
pub const CSV_HEADER: [&str; 10] =
    ["t", "gx", "gy", "gz", "ax", "ay", "az", "mx", "my", "mz"];

/// Tolerance for timestamp spacing deviations (s).
pub const TIME_UNIFORMITY_TOL: f64 = 1e-6;

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Path of the metadata sidecar for a dataset file.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Calibration parameters in report form. The distortion matrix is stored
/// row by row with an explicit layout tag, and angle-valued fields carry a
/// `_rad` suffix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsRecord {
    pub accel_bias: [f64; 3],
    pub gyro_bias: [f64; 3],
    pub distortion: DistortionRecord,
    pub mag_bias: [f64; 3],
    pub dip_angle_rad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionRecord {
    /// Always `"row-major"`; kept explicit so a reader can never guess.
    pub layout: String,
    pub values: [f64; 9],
}

impl ParamsRecord {
    pub fn from_params(p: &CalibrationParams) -> Self {
        let mut values = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                values[3 * r + c] = p.distortion[(r, c)];
            }
        }
        Self {
            accel_bias: p.accel_bias.into(),
            gyro_bias: p.gyro_bias.into(),
            distortion: DistortionRecord {
                layout: "row-major".to_string(),
                values,
            },
            mag_bias: p.mag_bias.into(),
            dip_angle_rad: p.dip_angle,
        }
    }

    pub fn to_params(&self) -> Result<CalibrationParams> {
        if self.distortion.layout != "row-major" {
            return Err(Error::Format(format!(
                "unsupported distortion layout '{}'",
                self.distortion.layout
            )));
        }
        let mut d = Matrix3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                d[(r, c)] = self.distortion.values[3 * r + c];
            }
        }
        Ok(CalibrationParams {
            accel_bias: Vector3::from(self.accel_bias),
            gyro_bias: Vector3::from(self.gyro_bias),
            distortion: d,
            mag_bias: Vector3::from(self.mag_bias),
            dip_angle: self.dip_angle_rad,
        })
    }
}

/// Sidecar metadata stored next to a dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub rate_hz: f64,
    pub rate_ratio: usize,
    /// SHA-256 of the CSV bytes.
    pub dataset_digest: String,
    /// Ground-truth parameters, present for synthetic datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<ParamsRecord>,
}

/// Write a dataset as CSV plus its metadata sidecar; returns the metadata
/// (including the digest of the bytes just written).
pub fn write_dataset(
    csv_path: &Path,
    dataset: &Dataset,
    truth: Option<&CalibrationParams>,
) -> Result<DatasetMeta> {
    dataset.validate()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for k in 0..dataset.len() {
        let t = k as f64 * dataset.dt;
        let g = &dataset.gyro[k];
        let a = &dataset.accel[k];
        let mut record: Vec<String> = vec![
            t.to_string(),
            g.x.to_string(),
            g.y.to_string(),
            g.z.to_string(),
            a.x.to_string(),
            a.y.to_string(),
            a.z.to_string(),
        ];
        match &dataset.mag[k] {
            Some(m) => {
                record.push(m.x.to_string());
                record.push(m.y.to_string());
                record.push(m.z.to_string());
            }
            None => record.extend([String::new(), String::new(), String::new()]),
        }
        w.write_record(&record)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("CSV buffer error: {e}")))?;
    let meta = DatasetMeta {
        rate_hz: 1.0 / dataset.dt,
        rate_ratio: dataset.rate_ratio,
        dataset_digest: sha256_hex(&bytes),
        truth: truth.map(ParamsRecord::from_params),
    };
    std::fs::write(csv_path, &bytes)?;
    std::fs::write(meta_path(csv_path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

fn parse_field(raw: &str, row: usize, col: &str) -> Result<f64> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("row {row}: cannot parse {col}='{raw}'")))?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: "dataset sample",
        });
    }
    Ok(v)
}

/// Read a dataset CSV (and its sidecar, when present).
///
/// Validates the header, strictly increasing and uniformly spaced
/// timestamps, finiteness, and a consistent magnetometer decimation
/// pattern; when a sidecar exists, its rate, ratio, and digest must match
/// the file.
pub fn read_dataset(csv_path: &Path) -> Result<(Dataset, DatasetMeta)> {
    let bytes = std::fs::read(csv_path)?;
    let digest = sha256_hex(&bytes);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes.as_slice());
    {
        let headers = reader.headers()?;
        let expect: Vec<&str> = CSV_HEADER.to_vec();
        if headers.iter().collect::<Vec<_>>() != expect {
            return Err(Error::Format(format!(
                "unexpected header '{}'",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
    }

    let mut times = Vec::new();
    let mut gyro = Vec::new();
    let mut accel = Vec::new();
    let mut mag: Vec<Option<Vector3<f64>>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != CSV_HEADER.len() {
            return Err(Error::Format(format!(
                "row {i}: expected {} fields, found {}",
                CSV_HEADER.len(),
                record.len()
            )));
        }
        times.push(parse_field(&record[0], i, "t")?);
        gyro.push(Vector3::new(
            parse_field(&record[1], i, "gx")?,
            parse_field(&record[2], i, "gy")?,
            parse_field(&record[3], i, "gz")?,
        ));
        accel.push(Vector3::new(
            parse_field(&record[4], i, "ax")?,
            parse_field(&record[5], i, "ay")?,
            parse_field(&record[6], i, "az")?,
        ));
        let mag_fields = [&record[7], &record[8], &record[9]];
        let empties = mag_fields.iter().filter(|s| s.trim().is_empty()).count();
        mag.push(match empties {
            3 => None,
            0 => Some(Vector3::new(
                parse_field(mag_fields[0], i, "mx")?,
                parse_field(mag_fields[1], i, "my")?,
                parse_field(mag_fields[2], i, "mz")?,
            )),
            _ => {
                return Err(Error::Format(format!(
                    "row {i}: magnetometer fields must be all present or all empty"
                )))
            }
        });
    }
    if times.len() < 2 {
        return Err(Error::TooFewSamples {
            context: "dataset file",
        });
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(Error::NonMonotoneTime { row: 1 });
    }
    for i in 1..times.len() {
        let step = times[i] - times[i - 1];
        if !(step > 0.0) {
            return Err(Error::NonMonotoneTime { row: i });
        }
        if (step - dt).abs() > TIME_UNIFORMITY_TOL {
            return Err(Error::NonUniformTime { row: i });
        }
    }

    // infer the decimation ratio from the magnetometer presence pattern
    let present: Vec<usize> = mag
        .iter()
        .enumerate()
        .filter_map(|(k, m)| m.is_some().then_some(k))
        .collect();
    if present.first() != Some(&0) {
        return Err(Error::InconsistentRatio { ratio: 0 });
    }
    let ratio = if present.len() > 1 {
        present[1]
    } else {
        mag.len()
    };
    for (k, m) in mag.iter().enumerate() {
        if m.is_some() != (k % ratio == 0) {
            return Err(Error::InconsistentRatio { ratio });
        }
    }

    let dataset = Dataset {
        dt,
        rate_ratio: ratio,
        gyro,
        accel,
        mag,
    };
    dataset.validate()?;

    let sidecar = meta_path(csv_path);
    let meta = if sidecar.exists() {
        let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(&sidecar)?)?;
        if (meta.rate_hz - 1.0 / dt).abs() > TIME_UNIFORMITY_TOL * meta.rate_hz {
            return Err(Error::MetaMismatch(format!(
                "sidecar rate {} Hz vs file rate {} Hz",
                meta.rate_hz,
                1.0 / dt
            )));
        }
        if meta.rate_ratio != ratio {
            return Err(Error::MetaMismatch(format!(
                "sidecar rate ratio {} vs inferred {}",
                meta.rate_ratio, ratio
            )));
        }
        if meta.dataset_digest != digest {
            return Err(Error::MetaMismatch(
                "dataset digest differs from the sidecar (file was modified)".into(),
            ));
        }
        meta
    } else {
        DatasetMeta {
            rate_hz: 1.0 / dt,
            rate_ratio: ratio,
            dataset_digest: digest,
            truth: None,
        }
    };
    Ok((dataset, meta))
}

/// The estimation method a report came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    JointMap,
    WuEkf,
    KokMl,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::JointMap => "joint_map",
            Method::WuEkf => "wu_ekf",
            Method::KokMl => "kok_ml",
        })
    }
}

/// A calibration result that records its own origin: which tool version and
/// method produced it, from which exact dataset, under which settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub toolkit_version: String,
    pub method: Method,
    /// SHA-256 of the dataset CSV the calibration consumed.
    pub dataset_digest: String,
    /// Echo of the configuration used.
    pub config: serde_json::Value,
    pub params: ParamsRecord,
    /// Method-specific solve statistics (iterations, costs, timings, …).
    pub stats: serde_json::Value,
}

pub fn write_report(path: &Path, report: &CalibrationReport) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<CalibrationReport> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Guard used before evaluating a report against a dataset: both must
/// reference the same bytes.
pub fn check_digest(report: &CalibrationReport, meta: &DatasetMeta) -> Result<()> {
    if report.dataset_digest != meta.dataset_digest {
        return Err(Error::DigestMismatch);
    }
    Ok(())
}
