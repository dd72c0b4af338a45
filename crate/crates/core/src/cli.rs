//! Command-line front end. Every run resolves a single JSON config (all keys
//! optional, unknown keys rejected) and writes the resolved values next to its
//! outputs so the run can be repeated exactly.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{fit_with_diagnostics, EstimationConfig, FitDiagnostics, FitResult};
use crate::experiment::{run_mc, McConfig};
use crate::matcore::Vector;
use crate::noise::{
    fbm_covariance_check, quadratic_variation_ratio, sample_increments, FbmCovarianceCheck,
    NoiseKind, NoiseSpec,
};
use crate::ratesio::{self, load_csv, predict_one_step, PredictionMetrics};
use crate::simulate::{simulate_path, ModelParams, PathGrid};

#[derive(Debug, Parser)]
#[command(name = "vasifit", version, about = "Simulate and calibrate multivariate generalized Vasicek models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one path and write it as CSV.
    Simulate(CommonArgs),
    /// Fit a path CSV and write the estimates as JSON.
    Fit {
        #[command(flatten)]
        common: CommonArgs,
        /// Path CSV with header `t,r1,...,rd`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Monte Carlo replications; `--out` is a directory.
    Mc(CommonArgs),
    /// Fit the training segment of a rate CSV and predict the holdout; `--out` is a directory.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        /// Rate series CSV with a date column and one column per rate.
        #[arg(long)]
        data: PathBuf,
    },
    /// Quadratic-variation and fBm covariance diagnostics of the noise generator.
    NoiseCheck(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON config file; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "VASIFIT_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long)]
    pub replications: Option<usize>,
}

/// Config file as written by the user.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub params: Option<ModelParams>,
    pub noise: Option<NoiseSpec>,
    pub estimation: Option<EstimationConfig>,
    /// Euler steps per simulated path.
    pub n: Option<usize>,
    pub h: Option<f64>,
    pub seed: Option<u64>,
    pub r0: Option<Vec<f64>>,
    pub replications: Option<usize>,
    pub workers: Option<usize>,
    pub data: Option<DataConfig>,
    pub noise_check: Option<NoiseCheckConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub date_column: String,
    /// Defaults to every non-date column in header order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_columns: Option<Vec<String>>,
    /// Model time per observation row.
    pub h: f64,
    pub min_rows: usize,
    pub holdout_fraction: f64,
    /// Refit the training segment for each listed Hurst index and report Θ̂ per value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hurst_sweep: Option<Vec<f64>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            date_column: "date".into(),
            value_columns: None,
            h: 1.0,
            min_rows: ratesio::MIN_ROWS,
            holdout_fraction: ratesio::DEFAULT_HOLDOUT,
            hurst_sweep: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseCheckConfig {
    pub qv_points: usize,
    pub cov_points: usize,
    pub cov_replications: usize,
    pub cov_stride: usize,
    pub z_threshold: f64,
}

impl Default for NoiseCheckConfig {
    fn default() -> Self {
        Self {
            qv_points: 100_000,
            cov_points: 1024,
            cov_replications: 5000,
            cov_stride: 32,
            z_threshold: 4.0,
        }
    }
}

/// Fully resolved configuration. `workers` is deliberately absent: it never
/// changes results, so sidecars stay identical across worker counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectiveConfig {
    pub params: ModelParams,
    pub noise: NoiseSpec,
    pub estimation: EstimationConfig,
    pub n: usize,
    pub h: f64,
    pub seed: u64,
    pub r0: Vec<f64>,
    pub replications: usize,
    pub data: DataConfig,
    pub noise_check: NoiseCheckConfig,
}

fn config_err(field: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(msg),
        other => Error::Config(format!("{field}: {other}")),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_json(&fs::read_to_string(p)?),
            None => Ok(Self::default()),
        }
    }

    /// Applies defaults and command-line overrides, then validates.
    pub fn resolve(&self, args: &CommonArgs) -> Result<(EffectiveConfig, usize)> {
        let params = self.params.clone().unwrap_or_else(ModelParams::example_diagonal);
        params.validate().map_err(|e| config_err("params", e))?;
        let d = params.dim();
        let noise = self.noise.clone().unwrap_or_else(|| NoiseSpec::brownian(d));
        noise.validate()?;
        if noise.d != d {
            return Err(Error::Config(format!(
                "noise.d = {} does not match the model dimension {d}",
                noise.d
            )));
        }
        let estimation = self.estimation.clone().unwrap_or_default();
        estimation.validate()?;
        let h = self.h.unwrap_or(0.4);
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Config(format!("h must be > 0, got {h}")));
        }
        let n = self.n.unwrap_or(10_000);
        if n == 0 {
            return Err(Error::Config("n must be >= 1".into()));
        }
        let r0 = self.r0.clone().unwrap_or_else(|| params.b.iter().copied().collect());
        if r0.len() != d || r0.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config(format!("r0 must hold {d} finite values")));
        }
        let replications = args.replications.or(self.replications).unwrap_or(100);
        if replications == 0 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        let workers = args.workers.or(self.workers).unwrap_or(1);
        if workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        let data = self.data.clone().unwrap_or_default();
        if !(data.h > 0.0) || !data.h.is_finite() {
            return Err(Error::Config(format!("data.h must be > 0, got {}", data.h)));
        }
        if !(data.holdout_fraction > 0.0 && data.holdout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.holdout_fraction must lie in (0, 1), got {}",
                data.holdout_fraction
            )));
        }
        if let Some(sweep) = &data.hurst_sweep {
            if let Some(bad) = sweep.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
                return Err(Error::Config(format!("data.hurst_sweep values must lie in (0, 1), got {bad}")));
            }
        }
        let noise_check = self.noise_check.clone().unwrap_or_default();
        if noise_check.qv_points < 2
            || noise_check.cov_points < 2
            || noise_check.cov_replications < 2
            || noise_check.cov_stride == 0
            || !(noise_check.z_threshold > 0.0)
        {
            return Err(Error::Config("noise_check values out of range".into()));
        }
        Ok((
            EffectiveConfig {
                params,
                noise,
                estimation,
                n,
                h,
                seed: args.seed.or(self.seed).unwrap_or(0),
                r0,
                replications,
                data,
                noise_check,
            },
            workers,
        ))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// `out.csv` → `out.config.json`.
fn sidecar_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.config.json"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn log_config(cmd: &str, cfg: &EffectiveConfig, workers: usize) {
    eprintln!(
        "vasifit {cmd}: d={} noise={:?} H={} n={} h={} seed={} t_upper={} replications={} workers={workers}",
        cfg.params.dim(),
        cfg.noise.kind,
        cfg.noise.hurst_exponent(),
        cfg.n,
        cfg.h,
        cfg.seed,
        cfg.estimation.t_upper,
        cfg.replications,
    );
}

pub fn cmd_simulate(cfg: &EffectiveConfig, out: &Path) -> Result<()> {
    let inc = sample_increments(&cfg.noise, cfg.n, cfg.h, cfg.seed)?;
    let sim = simulate_path(&cfg.params, &inc, &Vector::from_column_slice(&cfg.r0))?;
    for w in &sim.warnings {
        eprintln!("warning: {w}");
    }
    ensure_parent(out)?;
    let mut w = BufWriter::new(File::create(out)?);
    sim.path.write_csv(&mut w)?;
    w.flush()?;
    write_json(&sidecar_path(out), cfg)
}

#[derive(Debug, Serialize)]
struct FitFailure<'a> {
    error: String,
    category: &'a str,
    diagnostics: &'a FitDiagnostics,
}

pub fn cmd_fit(cfg: &EffectiveConfig, input: &Path, out: &Path) -> Result<()> {
    let path = PathGrid::read_csv(BufReader::new(File::open(input)?))?;
    let (res, diag) = fit_with_diagnostics(&path, &cfg.noise, &cfg.estimation);
    ensure_parent(out)?;
    write_json(&sidecar_path(out), cfg)?;
    match res {
        Ok(f) => write_json(out, &f),
        Err(e) => {
            write_json(
                out,
                &FitFailure {
                    error: e.to_string(),
                    category: e.category(),
                    diagnostics: &diag,
                },
            )?;
            Err(e)
        }
    }
}

pub fn mc_config(cfg: &EffectiveConfig, workers: usize) -> McConfig {
    McConfig {
        params: cfg.params.clone(),
        spec: cfg.noise.clone(),
        replications: cfg.replications,
        n: cfg.n,
        h: cfg.h,
        cfg: cfg.estimation.clone(),
        master_seed: cfg.seed,
        workers,
        r0: Some(cfg.r0.clone()),
    }
}

pub fn cmd_mc(cfg: &EffectiveConfig, workers: usize, out_dir: &Path) -> Result<()> {
    let mc = mc_config(cfg, workers);
    mc.validate()?;
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("config.json"), cfg)?;
    let report = run_mc(&mc)?;
    if report.metadata.failures > 0 {
        eprintln!(
            "{} of {} replications failed: {:?}",
            report.metadata.failures, report.metadata.replications, report.failure_reasons
        );
    }
    write_json(&out_dir.join("report.json"), &report)?;
    let mut w = BufWriter::new(File::create(out_dir.join("replications.csv"))?);
    report.write_replications_csv(&mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(out_dir.join("histograms.csv"))?);
    report.write_histograms_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepEntry {
    hurst: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    theta_hat: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct PredictSummary<'a> {
    rows_read: usize,
    rows_dropped: usize,
    training_rows: usize,
    metrics: &'a PredictionMetrics,
}

fn header_columns(data: &Path, date_column: &str) -> Result<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(data)?;
    Ok(r.headers()?
        .iter()
        .filter(|c| *c != date_column)
        .map(str::to_string)
        .collect())
}

pub fn cmd_predict(cfg: &EffectiveConfig, data: &Path, out_dir: &Path) -> Result<()> {
    let dc = &cfg.data;
    let columns = match &dc.value_columns {
        Some(c) => c.clone(),
        None => header_columns(data, &dc.date_column)?,
    };
    let (series, parse) = load_csv(
        BufReader::new(File::open(data)?),
        &dc.date_column,
        &columns,
        dc.h,
        dc.min_rows,
    )?;
    if series.d() != cfg.noise.d {
        return Err(Error::Config(format!(
            "data has {} value columns but noise.d = {}",
            series.d(),
            cfg.noise.d
        )));
    }
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("config.json"), cfg)?;
    let start = series.holdout_start(dc.holdout_fraction)?;
    let train = series.head(start).to_path()?;

    let (res, diag) = fit_with_diagnostics(&train, &cfg.noise, &cfg.estimation);
    let fit: FitResult = match res {
        Ok(f) => f,
        Err(e) => {
            write_json(
                &out_dir.join("fit.json"),
                &FitFailure {
                    error: e.to_string(),
                    category: e.category(),
                    diagnostics: &diag,
                },
            )?;
            return Err(e);
        }
    };
    write_json(&out_dir.join("fit.json"), &fit)?;

    let report = predict_one_step(&fit, &series, dc.holdout_fraction)?;
    let mut w = BufWriter::new(File::create(out_dir.join("predictions.csv"))?);
    report.write_csv(&mut w)?;
    w.flush()?;
    let metrics = report.metrics();
    write_json(
        &out_dir.join("metrics.json"),
        &PredictSummary {
            rows_read: parse.rows_read,
            rows_dropped: parse.rows_dropped,
            training_rows: start,
            metrics: &metrics,
        },
    )?;

    let mut w = BufWriter::new(File::create(out_dir.join("increments.csv"))?);
    write_increments(&mut w, &ratesio::extract_increments(&fit, &series.head(start))?, &series)?;
    w.flush()?;

    if let Some(sweep) = &dc.hurst_sweep {
        let entries: Vec<SweepEntry> = sweep
            .iter()
            .map(|&hurst| {
                let spec = NoiseSpec::fbm(series.d(), hurst);
                match crate::estimate::fit(&train, &spec, &cfg.estimation) {
                    Ok(f) => SweepEntry {
                        hurst,
                        theta_hat: Some(crate::matcore::rows::to_rows(&f.theta_hat)),
                        error: None,
                    },
                    Err(e) => SweepEntry {
                        hurst,
                        theta_hat: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect();
        write_json(&out_dir.join("hurst_sweep.json"), &entries)?;
    }
    Ok(())
}

fn write_increments<W: Write>(
    writer: W,
    inc: &crate::noise::IncrementArray,
    series: &ratesio::RateSeries,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(series.labels.iter().map(|l| format!("dx_{l}")));
    w.write_record(&header)?;
    for k in 0..inc.len() {
        let mut rec = vec![series.dates[k + 1].to_string()];
        rec.extend(inc.values.column(k).iter().map(|x| format!("{x:.16e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct NoiseCheckReport {
    qv_points: usize,
    qv_ratio: Vec<Vec<f64>>,
    qv_max_deviation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    fbm_covariance: Option<FbmCovarianceCheck>,
}

pub fn cmd_noise_check(cfg: &EffectiveConfig, out: &Path) -> Result<()> {
    let nc = &cfg.noise_check;
    let qv = quadratic_variation_ratio(&cfg.noise, nc.qv_points, cfg.seed)?;
    let dev = (&qv - crate::matcore::Matrix::identity(qv.nrows(), qv.ncols())).amax();
    let cov = match cfg.noise.kind {
        NoiseKind::Fbm | NoiseKind::Brownian => Some(fbm_covariance_check(
            cfg.noise.hurst_exponent(),
            nc.cov_points,
            nc.cov_replications,
            nc.cov_stride,
            cfg.seed,
            nc.z_threshold,
        )?),
        NoiseKind::CompoundPoisson => None,
    };
    eprintln!("quadratic variation ratio max |QV − I| = {dev:.4}");
    if let Some(c) = &cov {
        eprintln!(
            "fBm covariance: {} pairs, max |z| = {:.3}, {} above {}",
            c.checked_pairs, c.max_abs_z, c.exceedances, c.z_threshold
        );
    }
    ensure_parent(out)?;
    write_json(&sidecar_path(out), cfg)?;
    write_json(
        out,
        &NoiseCheckReport {
            qv_points: nc.qv_points,
            qv_ratio: crate::matcore::rows::to_rows(&qv),
            qv_max_deviation: dev,
            fbm_covariance: cov,
        },
    )
}

pub fn run(cli: Cli) -> Result<()> {
    let (name, common) = match &cli.command {
        Command::Simulate(c) => ("simulate", c),
        Command::Fit { common, .. } => ("fit", common),
        Command::Mc(c) => ("mc", c),
        Command::Predict { common, .. } => ("predict", common),
        Command::NoiseCheck(c) => ("noise-check", c),
    };
    let raw = RunConfig::load(common.config.as_deref())?;
    let (cfg, workers) = raw.resolve(common)?;
    log_config(name, &cfg, workers);
    match &cli.command {
        Command::Simulate(c) => cmd_simulate(&cfg, &c.out),
        Command::Fit { common, input } => cmd_fit(&cfg, input, &common.out),
        Command::Mc(c) => cmd_mc(&cfg, workers, &c.out),
        Command::Predict { common, data } => cmd_predict(&cfg, data, &common.out),
        Command::NoiseCheck(c) => cmd_noise_check(&cfg, &c.out),
    }
}
