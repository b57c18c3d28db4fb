//! Command-line frontend for the calibration toolkit.
//!
//! Subcommands: `simulate` (synthetic datasets), `calibrate` (one dataset →
//! one JSON report), `compare` (Monte Carlo method comparison), `evaluate`
//! (report vs. ground truth). All machine-readable output goes to files or
//! stdout; logging goes to stderr.
//!
//! Exit codes: 0 success, 2 I/O failure, 3 malformed data, 4 the estimator
//! did not converge, 5 bad configuration, 6 the dataset cannot support
//! calibration (insufficient excitation / degenerate geometry).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use magcal::baselines::{kok_ml, wu_ekf, EkfPriors, MlOptions};
use magcal::compare::{run_comparison, table_to_csv, CompareConfig};
use magcal::init::{build_init, InitConfig};
use magcal::io::{
    check_digest, read_dataset, read_report, write_dataset, write_report,
    CalibrationReport, Method, ParamsRecord,
};
use magcal::metrics::ParamErrors;
use magcal::models::{NoiseConfig, ReferenceField};
use magcal::sim::{simulate, NoiseDensities, SimConfig};
use magcal::solver::{
    joint::{solve_joint_map, JointOptions, JointPoint},
    StopReason,
};
use magcal::{Error, Result};

const EXIT_IO: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NO_CONVERGENCE: u8 = 4;
const EXIT_CONFIG: u8 = 5;
const EXIT_DEGENERATE: u8 = 6;

#[derive(Parser)]
#[command(
    name = "magcal",
    version = magcal::VERSION,
    about = "Magnetometer/IMU joint calibration toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Simulate(SimulateArgs),
    /// Estimate calibration parameters from a dataset.
    Calibrate(CalibrateArgs),
    /// Monte Carlo comparison of methods across a sampling sweep.
    Compare(CompareArgs),
    /// Compare a calibration report against a dataset's ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// RNG seed; everything about the dataset derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// IMU sample rate (Hz).
    #[arg(long, default_value_t = 80.0)]
    rate: f64,
    /// IMU-to-magnetometer rate ratio N.
    #[arg(long, default_value_t = 1)]
    ratio: usize,
    /// Motion duration in seconds (a 2 s stationary lead-in is added).
    #[arg(long, default_value_t = 300.0)]
    duration: f64,
    /// Generate without measurement noise.
    #[arg(long)]
    noiseless: bool,
    /// Output CSV path; a `.meta.json` sidecar is written next to it.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    JointMap,
    WuEkf,
    KokMl,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::JointMap => Method::JointMap,
            MethodArg::WuEkf => Method::WuEkf,
            MethodArg::KokMl => Method::KokMl,
        }
    }
}

/// Parameter groups that can be pinned during the joint solve.
#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum FreezeArg {
    AccelBias,
    GyroBias,
    Distortion,
    MagBias,
    Dip,
}

impl FreezeArg {
    fn range(self) -> (usize, usize) {
        match self {
            FreezeArg::AccelBias => (0, 3),
            FreezeArg::GyroBias => (3, 3),
            FreezeArg::Distortion => (6, 9),
            FreezeArg::MagBias => (15, 3),
            FreezeArg::Dip => (18, 1),
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    /// Dataset CSV (with optional `.meta.json` sidecar).
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// JSON configuration; must provide `dip_angle_deg`.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::JointMap)]
    method: MethodArg,
    /// Output report path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Decimate the magnetometer stream by this factor before calibrating.
    #[arg(long)]
    downsample: Option<usize>,
    /// Parameter groups to hold at their initial values (joint-map only).
    #[arg(long, value_enum, value_delimiter = ',')]
    freeze: Vec<FreezeArg>,
    /// Cap on accepted optimizer iterations (joint-map only).
    #[arg(long)]
    max_iter: Option<usize>,
    /// Step-norm convergence tolerance (joint-map only).
    #[arg(long)]
    step_tol: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    /// JSON sweep configuration.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Output table (JSON).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Optional plot-ready CSV rendering of the same table.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Calibration report to evaluate.
    #[arg(long, value_name = "FILE")]
    report: PathBuf,
    /// The dataset the report was computed from (must carry ground truth).
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
}

/// Calibration configuration file: initialization settings plus optional
/// noise densities and method-specific knobs.
#[derive(Deserialize)]
struct CalibrateConfig {
    #[serde(flatten)]
    init: InitConfig,
    /// Continuous-time noise densities; defaults match the benchmark.
    #[serde(default)]
    densities: Option<NoiseDensities>,
    #[serde(default)]
    ekf_priors: Option<EkfPriors>,
    #[serde(default)]
    ml_options: Option<MlOptions>,
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Csv(_)
        | Error::Json(_)
        | Error::Format(_)
        | Error::NonMonotoneTime { .. }
        | Error::NonUniformTime { .. }
        | Error::NonFinite { .. }
        | Error::InconsistentRatio { .. }
        | Error::MetaMismatch(_)
        | Error::DigestMismatch
        | Error::TooFewSamples { .. } => EXIT_DATA,
        Error::RotationOutOfRange { .. }
        | Error::FilterDivergence { .. }
        | Error::IndefiniteSystem
        | Error::Comparison(_) => EXIT_NO_CONVERGENCE,
        Error::Config(_) => EXIT_CONFIG,
        Error::NoStationarySpan
        | Error::DegenerateQuadric { .. }
        | Error::InsufficientExcitation { .. } => EXIT_DEGENERATE,
    }
}

fn read_config_value(path: &Path) -> Result<serde_json::Value> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn parse_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn cmd_simulate(args: &SimulateArgs) -> Result<ExitCode> {
    let mut cfg = SimConfig {
        seed: args.seed,
        rate_hz: args.rate,
        rate_ratio: args.ratio,
        duration_s: args.duration,
        ..Default::default()
    };
    if args.noiseless {
        cfg.densities = NoiseDensities::zero();
    }
    let out = simulate(&cfg)?;
    let meta = write_dataset(&args.out, &out.dataset, Some(&out.truth.params))?;
    log::info!(
        "wrote {} samples (ratio {}) to {}; digest {}",
        out.dataset.len(),
        out.dataset.rate_ratio,
        args.out.display(),
        &meta.dataset_digest[..12]
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<ExitCode> {
    let (mut dataset, meta) = read_dataset(&args.data)?;
    if let Some(d) = args.downsample {
        dataset = dataset.downsample(d)?;
        log::info!("downsampled magnetometer stream to ratio {}", dataset.rate_ratio);
    }
    let config: CalibrateConfig = parse_config(&args.config)?;
    let mut config_echo = read_config_value(&args.config)?;
    if let (Some(d), serde_json::Value::Object(map)) = (args.downsample, &mut config_echo) {
        map.insert("downsample".into(), serde_json::json!(d));
    }
    let densities = config.densities.unwrap_or_default();
    // Sigmas follow the rates the sensors actually sampled at (the sidecar's
    // pre-decimation ratio): dropping samples with --downsample does not
    // change the noise of the samples that remain.
    let noise = NoiseConfig::from_densities(
        densities.accel,
        densities.gyro,
        densities.mag,
        meta.rate_hz,
        meta.rate_ratio,
    );
    let field = ReferenceField {
        gravity: config.init.gravity,
    };
    let init = build_init(&dataset, &noise, &config.init)?;
    log::info!(
        "initialized from {} stationary samples; magnetometer fit rms {:.3e}",
        init.stationary_span.len(),
        init.intrinsic_rms
    );

    let method: Method = args.method.into();
    let (params, stats, converged) = match method {
        Method::JointMap => {
            let mut options = JointOptions::default();
            if let Some(n) = args.max_iter {
                options.lm.max_iterations = n;
            }
            if let Some(t) = args.step_tol {
                options.lm.step_tolerance = t;
            }
            for f in &args.freeze {
                let (offset, dim) = f.range();
                options.freeze.freeze_range(offset, dim);
            }
            let est = solve_joint_map(
                &dataset,
                field,
                &noise,
                JointPoint {
                    params: init.params0.clone(),
                    orientations: init.trajectory0.clone(),
                },
                &options,
            )?;
            let converged = matches!(est.report.stop_reason, StopReason::StepTolerance);
            if est.excitation_warning {
                log::warn!(
                    "excitation warning: smallest parameter-information eigenvalue {:.3e}",
                    est.schur_min_eigenvalue
                );
            }
            let stats = serde_json::json!({
                "termination_reason": est.report.stop_reason,
                "solve": est.report,
                "diagnostics": est.diagnostics(),
            });
            (est.params, stats, converged)
        }
        Method::WuEkf => {
            let priors = config.ekf_priors.clone().unwrap_or_default();
            let (params, state) = wu_ekf(&dataset, field, &noise, &init, &priors)?;
            let stats = serde_json::json!({
                "termination_reason": "completed",
                "updates": state.updates,
            });
            (params, stats, true)
        }
        Method::KokMl => {
            let opts = config.ml_options.clone().unwrap_or_default();
            let est = kok_ml(&dataset, field, &noise, &init, &opts)?;
            let stats = serde_json::json!({
                "termination_reason": if est.converged { "step_tolerance" } else { "max_iterations" },
                "iterations": est.iterations,
                "ekf_passes": est.ekf_passes,
                "neg_log_likelihood": est.neg_log_likelihood,
            });
            let converged = est.converged;
            (est.params, stats, converged)
        }
    };

    let report = CalibrationReport {
        toolkit_version: magcal::VERSION.to_string(),
        method,
        dataset_digest: meta.dataset_digest.clone(),
        config: config_echo,
        params: ParamsRecord::from_params(&params),
        stats,
    };
    write_report(&args.out, &report)?;
    log::info!("wrote report to {}", args.out.display());
    if !converged {
        log::error!("estimator did not converge; report written with termination reason");
        return Ok(ExitCode::from(EXIT_NO_CONVERGENCE));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(args: &CompareArgs) -> Result<ExitCode> {
    let config: CompareConfig = parse_config(&args.config)?;
    let table = run_comparison(&config)?;
    std::fs::write(&args.out, serde_json::to_vec_pretty(&table)?)?;
    log::info!("wrote {} cells to {}", table.cells.len(), args.out.display());
    if let Some(csv_path) = &args.csv {
        std::fs::write(csv_path, table_to_csv(&table))?;
        log::info!("wrote CSV rendering to {}", csv_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<ExitCode> {
    let report = read_report(&args.report)?;
    let (_dataset, meta) = read_dataset(&args.data)?;
    check_digest(&report, &meta)?;
    log::info!(
        "digest {} matches; comparing against the recorded truth",
        &report.dataset_digest[..12]
    );
    let truth_record = meta.truth.ok_or_else(|| {
        Error::Config("dataset has no ground truth to evaluate against".into())
    })?;
    let truth = truth_record.to_params()?;
    let estimate = report.params.to_params()?;
    let e = ParamErrors::between(&estimate, &truth);
    let json = serde_json::json!({
        "method": report.method,
        "dataset_digest": report.dataset_digest,
        "group_errors": {
            "accel_bias": e.accel_bias.norm(),
            "gyro_bias": e.gyro_bias.norm(),
            "distortion_frobenius": e.distortion_frobenius,
            "mag_bias": e.mag_bias.norm(),
            "dip_rad": e.dip_rad,
        },
        "component_errors": {
            "accel_bias": [e.accel_bias.x, e.accel_bias.y, e.accel_bias.z],
            "gyro_bias": [e.gyro_bias.x, e.gyro_bias.y, e.gyro_bias.z],
            "mag_bias": [e.mag_bias.x, e.mag_bias.y, e.mag_bias.z],
        },
    });
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .init();
    if let Ok(raw) = std::env::var("MAGCAL_THREADS") {
        match raw.trim().parse::<usize>() {
            Ok(n) => magcal::configure_threads(Some(n)),
            Err(_) => {
                log::error!("MAGCAL_THREADS must be a positive integer, got '{raw}'");
                return ExitCode::from(EXIT_CONFIG);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
