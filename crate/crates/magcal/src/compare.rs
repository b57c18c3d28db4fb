//! Monte Carlo comparison of calibration methods across sampling regimes.
//!
//! A sweep fixes either the IMU rate (varying the magnetometer decimation
//! ratio) or the ratio (varying the rate). Every sweep point is evaluated
//! on `num_runs` independently seeded synthetic datasets; each dataset is
//! generated once and fed to every method, so methods are compared on
//! identical data. Cells are computed in parallel into index-addressed
//! slots and reduced in a fixed order, which makes the resulting tables
//! reproducible run to run (wall-clock fields aside).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{kok_ml, wu_ekf, EkfPriors, MlOptions};
use crate::error::{Error, Result};
use crate::init::{build_init, InitBundle, InitConfig};
use crate::io::Method;
use crate::metrics::{rmse, GroupRmse, ParamErrors};
use crate::models::{CalibrationParams, ReferenceField};
use crate::parallel;
use crate::sim::{simulate, NoiseDensities, SimConfig, SimOutput};
use crate::solver::joint::{solve_joint_map, JointOptions, JointPoint};

/// What varies across the sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepSpec {
    /// Fixed IMU rate, sweep the IMU-to-magnetometer ratio.
    Ratio { rate_hz: f64, ratios: Vec<usize> },
    /// Fixed ratio, sweep the IMU rate.
    Frequency { rates: Vec<f64>, ratio: usize },
}

impl SweepSpec {
    /// Sweep points as (rate_hz, rate_ratio) pairs.
    pub fn points(&self) -> Vec<(f64, usize)> {
        match self {
            SweepSpec::Ratio { rate_hz, ratios } => {
                ratios.iter().map(|&n| (*rate_hz, n)).collect()
            }
            SweepSpec::Frequency { rates, ratio } => {
                rates.iter().map(|&r| (r, *ratio)).collect()
            }
        }
    }
}

fn default_duration() -> f64 {
    300.0
}
fn default_dip() -> f64 {
    72.0
}
fn default_methods() -> Vec<Method> {
    vec![Method::JointMap, Method::WuEkf]
}

/// Full sweep description: seeding, sweep axis, duration, and methods.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareConfig {
    /// Run `r` of every sweep point uses seed `base_seed + r`.
    pub base_seed: u64,
    pub num_runs: usize,
    pub sweep: SweepSpec,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default)]
    pub densities: NoiseDensities,
    /// Dip angle handed to the initializer (the truth is drawn per run).
    #[serde(default = "default_dip")]
    pub dip_angle_deg: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
}

/// One (sweep point × method) cell of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub rate_hz: f64,
    pub rate_ratio: usize,
    pub method: Method,
    pub runs: usize,
    pub failures: usize,
    /// RMSE over the successful runs.
    pub rmse: GroupRmse,
    /// Mean wall time of one full calibration (initialization + solve), in
    /// seconds, over the successful runs.
    pub mean_wall_time_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub config: CompareConfig,
    pub cells: Vec<CellResult>,
}

fn run_method(
    method: Method,
    out: &SimOutput,
    init: &InitBundle,
) -> Result<CalibrationParams> {
    let field = ReferenceField::default();
    match method {
        Method::JointMap => {
            let estimate = solve_joint_map(
                &out.dataset,
                field,
                &out.noise,
                JointPoint {
                    params: init.params0.clone(),
                    orientations: init.trajectory0.clone(),
                },
                &JointOptions::default(),
            )?;
            Ok(estimate.params)
        }
        Method::WuEkf => {
            let (params, _) =
                wu_ekf(&out.dataset, field, &out.noise, init, &EkfPriors::default())?;
            Ok(params)
        }
        Method::KokMl => {
            let est = kok_ml(&out.dataset, field, &out.noise, init, &MlOptions::default())?;
            Ok(est.params)
        }
    }
}

type MethodOutcome = (Method, Result<(ParamErrors, f64)>);

fn run_point(cfg: &CompareConfig, rate_hz: f64, ratio: usize, run: usize) -> Vec<MethodOutcome> {
    let sim_cfg = SimConfig {
        seed: cfg.base_seed + run as u64,
        rate_hz,
        rate_ratio: ratio,
        duration_s: cfg.duration_s,
        densities: cfg.densities,
        ..Default::default()
    };
    let out = match simulate(&sim_cfg) {
        Ok(out) => out,
        Err(e) => {
            let msg = e.to_string();
            return cfg
                .methods
                .iter()
                .map(|&m| (m, Err(Error::Comparison(msg.clone()))))
                .collect();
        }
    };
    // one shared initialization per dataset; its cost is charged to every
    // method because each would pay it standalone
    let init_start = Instant::now();
    let init = build_init(
        &out.dataset,
        &out.noise,
        &InitConfig::with_dip_deg(cfg.dip_angle_deg),
    );
    let init_time = init_start.elapsed().as_secs_f64();
    cfg.methods
        .iter()
        .map(|&m| {
            let result = match &init {
                Ok(bundle) => {
                    let t0 = Instant::now();
                    run_method(m, &out, bundle).map(|params| {
                        (
                            ParamErrors::between(&params, &out.truth.params),
                            init_time + t0.elapsed().as_secs_f64(),
                        )
                    })
                }
                Err(e) => Err(Error::Comparison(e.to_string())),
            };
            (m, result)
        })
        .collect()
}

/// Run the full sweep. Fails if any method fails on more than half of the
/// runs of any sweep point; the error carries the first failure's message.
pub fn run_comparison(cfg: &CompareConfig) -> Result<ComparisonTable> {
    if cfg.num_runs == 0 {
        return Err(Error::Config("comparison needs at least one run".into()));
    }
    if cfg.methods.is_empty() {
        return Err(Error::Config("comparison needs at least one method".into()));
    }
    let points = cfg.sweep.points();
    if points.is_empty() {
        return Err(Error::Config("comparison sweep has no points".into()));
    }

    let outcomes: Vec<Vec<MethodOutcome>> =
        parallel::map_indexed(points.len() * cfg.num_runs, |j| {
            let (p, r) = (j / cfg.num_runs, j % cfg.num_runs);
            let (rate_hz, ratio) = points[p];
            run_point(cfg, rate_hz, ratio, r)
        });

    let mut cells = Vec::new();
    for (p, &(rate_hz, ratio)) in points.iter().enumerate() {
        for (m_idx, &method) in cfg.methods.iter().enumerate() {
            let mut errors = Vec::new();
            let mut wall = 0.0;
            let mut failures = 0;
            let mut first_failure: Option<String> = None;
            for r in 0..cfg.num_runs {
                match &outcomes[p * cfg.num_runs + r][m_idx].1 {
                    Ok((e, w)) => {
                        errors.push(e.clone());
                        wall += w;
                    }
                    Err(e) => {
                        failures += 1;
                        first_failure.get_or_insert_with(|| e.to_string());
                    }
                }
            }
            if 2 * failures > cfg.num_runs {
                return Err(Error::Comparison(format!(
                    "{method} failed {failures}/{} runs at rate {rate_hz} Hz, \
                     ratio {ratio}; first failure: {}",
                    cfg.num_runs,
                    first_failure.unwrap_or_default()
                )));
            }
            let successes = cfg.num_runs - failures;
            cells.push(CellResult {
                rate_hz,
                rate_ratio: ratio,
                method,
                runs: cfg.num_runs,
                failures,
                rmse: rmse(&errors),
                mean_wall_time_s: if successes > 0 {
                    wall / successes as f64
                } else {
                    0.0
                },
            });
        }
    }
    Ok(ComparisonTable {
        config: cfg.clone(),
        cells,
    })
}

/// Plot-ready CSV rendering: one row per cell.
pub fn table_to_csv(table: &ComparisonTable) -> String {
    let mut out = String::from(
        "rate_hz,rate_ratio,method,runs,failures,\
         rmse_accel_bias,rmse_gyro_bias,rmse_distortion,rmse_mag_bias,rmse_dip,\
         mean_wall_time_s\n",
    );
    for c in &table.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            c.rate_hz,
            c.rate_ratio,
            c.method,
            c.runs,
            c.failures,
            c.rmse.accel_bias,
            c.rmse.gyro_bias,
            c.rmse.distortion,
            c.rmse.mag_bias,
            c.rmse.dip,
            c.mean_wall_time_s
        ));
    }
    out
}
