//! Monte Carlo replication harness: simulate `R` paths, fit each one and
//! summarize the sampling distribution of `Θ̂ − Θ`, `σ̂ − σ` and `b̂ − b`.
//!
//! Replication `j` draws its noise from the substreams `(master_seed, j, ·)`, so a
//! report depends only on the configuration and never on the worker count.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{fit, EstimationConfig};
use crate::matcore::{rows, Matrix, Vector};
use crate::noise::{sample_increments_stream, NoiseSpec};
use crate::simulate::{simulate_path, ModelParams};

pub const HISTOGRAM_BINS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub params: ModelParams,
    pub spec: NoiseSpec,
    pub replications: usize,
    /// Number of Euler steps per path.
    pub n: usize,
    pub h: f64,
    pub cfg: EstimationConfig,
    pub master_seed: u64,
    pub workers: usize,
    /// Initial value; `None` starts every path at `b`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r0: Option<Vec<f64>>,
}

impl McConfig {
    /// Diagonal example on the 10⁴-point, `h = 0.4` grid with 100 replications.
    pub fn example_diagonal(hurst: f64) -> Self {
        Self {
            params: ModelParams::example_diagonal(),
            spec: NoiseSpec::fbm(2, hurst),
            replications: 100,
            n: 10_000,
            h: 0.4,
            cfg: EstimationConfig::default(),
            master_seed: 0,
            workers: 1,
            r0: None,
        }
    }

    pub fn example_nondiagonal(hurst: f64) -> Self {
        Self {
            params: ModelParams::example_nondiagonal(),
            ..Self::example_diagonal(hurst)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.spec.validate()?;
        self.cfg.validate()?;
        if self.spec.d != self.params.dim() {
            return Err(Error::Config(format!(
                "noise dimension {} does not match model dimension {}",
                self.spec.d,
                self.params.dim()
            )));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::Config(format!("h must be > 0, got {}", self.h)));
        }
        if !(self.n as f64 * self.h >= 2.0 * self.cfg.t_upper) {
            return Err(Error::Config(format!(
                "path duration N·h = {} must be at least 2·t_upper = {}",
                self.n as f64 * self.h,
                2.0 * self.cfg.t_upper
            )));
        }
        if let Some(r0) = &self.r0 {
            if r0.len() != self.params.dim() {
                return Err(Error::Config("r0 must have the model dimension".into()));
            }
        }
        Ok(())
    }

    pub fn initial_value(&self) -> Vector {
        match &self.r0 {
            Some(r0) => Vector::from_column_slice(r0),
            None => self.params.b.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationEstimate {
    pub replication: usize,
    #[serde(with = "rows")]
    pub theta_hat: Matrix,
    #[serde(with = "rows::vector")]
    pub b_hat: Vector,
    #[serde(with = "rows")]
    pub sigma_hat: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub replication: usize,
    pub category: String,
    pub message: String,
}

/// Mean, sample standard deviation (divisor `R − 1`) and midpoint quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub q01: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub q99: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub component: String,
    pub bins: Vec<Bin>,
    /// Values outside the 0.5–99.5% quantile range.
    pub below: usize,
    pub above: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub component: String,
    pub error: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummaries {
    pub components: Vec<ComponentSummary>,
    pub theta_frobenius: Summary,
    pub histograms: Vec<Histogram>,
}

impl McSummaries {
    pub fn component(&self, name: &str) -> Option<&Summary> {
        self.components
            .iter()
            .find(|c| c.component == name)
            .map(|c| &c.error)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McMetadata {
    pub replications: usize,
    pub successes: usize,
    pub failures: usize,
    pub master_seed: u64,
    pub n: usize,
    pub h: f64,
    pub duration: f64,
    pub params: ModelParams,
    pub spec: NoiseSpec,
    pub estimation: EstimationConfig,
    #[serde(with = "rows::vector")]
    pub r0: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub metadata: McMetadata,
    /// Failure counts per category.
    pub failure_reasons: BTreeMap<String, usize>,
    pub failures: Vec<FailureRecord>,
    pub summaries: McSummaries,
    /// Per-replication table; exported as CSV rather than in the JSON document.
    #[serde(skip)]
    pub estimates: Vec<ReplicationEstimate>,
}

enum Outcome {
    Success(ReplicationEstimate),
    Failure(FailureRecord),
}

fn run_replication(mc: &McConfig, j: usize) -> Outcome {
    let attempt = || -> Result<ReplicationEstimate> {
        let inc = sample_increments_stream(&mc.spec, mc.n, mc.h, mc.master_seed, j as u64)?;
        let sim = simulate_path(&mc.params, &inc, &mc.initial_value())?;
        let f = fit(&sim.path, &mc.spec, &mc.cfg)?;
        Ok(ReplicationEstimate {
            replication: j,
            theta_hat: f.theta_hat,
            b_hat: f.b_hat,
            sigma_hat: f.sigma_hat,
        })
    };
    match attempt() {
        Ok(e) => Outcome::Success(e),
        Err(e) => Outcome::Failure(FailureRecord {
            replication: j,
            category: e.category().to_string(),
            message: e.to_string(),
        }),
    }
}

/// Runs every replication on a pool of `mc.workers` threads.
pub fn run_mc(mc: &McConfig) -> Result<McReport> {
    mc.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(mc.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Outcome> = pool.install(|| {
        (0..mc.replications)
            .into_par_iter()
            .map(|j| run_replication(mc, j))
            .collect()
    });

    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Success(e) => estimates.push(e),
            Outcome::Failure(f) => failures.push(f),
        }
    }
    let mut failure_reasons = BTreeMap::new();
    for f in &failures {
        *failure_reasons.entry(f.category.clone()).or_insert(0) += 1;
    }
    if estimates.is_empty() {
        let reasons = failure_reasons
            .iter()
            .map(|(k, v)| format!("{k} x{v}"))
            .collect::<Vec<_>>()
            .join(", ");
        let first = failures.first().map(|f| f.message.clone()).unwrap_or_default();
        return Err(Error::AllReplicationsFailed {
            replications: mc.replications,
            reasons: format!("{reasons}; first: {first}"),
        });
    }
    let summaries = summarize(&estimates, &mc.params)?;
    Ok(McReport {
        metadata: McMetadata {
            replications: mc.replications,
            successes: estimates.len(),
            failures: failures.len(),
            master_seed: mc.master_seed,
            n: mc.n,
            h: mc.h,
            duration: mc.n as f64 * mc.h,
            params: mc.params.clone(),
            spec: mc.spec.clone(),
            estimation: mc.cfg.clone(),
            r0: mc.initial_value(),
        },
        failure_reasons,
        failures,
        summaries,
        estimates,
    })
}

/// Quantile by the midpoint convention on sorted data: the average of the two
/// order statistics bracketing position `p·(n − 1)`.
pub fn quantile_midpoint(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    0.5 * (sorted[lo] + sorted[hi])
}

pub fn summary(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::EmptyReport("no values to summarize".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p| quantile_midpoint(&sorted, p);
    Ok(Summary {
        count: n,
        mean,
        std,
        q01: q(0.01),
        q05: q(0.05),
        q50: q(0.50),
        q95: q(0.95),
        q99: q(0.99),
    })
}

/// Fixed-width histogram over the 0.5–99.5% midpoint-quantile range.
pub fn histogram(component: &str, values: &[f64]) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::EmptyReport(format!("no values for {component}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_midpoint(&sorted, 0.005);
    let mut hi = quantile_midpoint(&sorted, 0.995);
    if !(hi > lo) {
        hi = lo + (lo.abs() * 1e-9).max(1e-12);
    }
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let mut bins: Vec<Bin> = (0..HISTOGRAM_BINS)
        .map(|k| Bin {
            left: lo + k as f64 * width,
            right: if k + 1 == HISTOGRAM_BINS {
                hi
            } else {
                lo + (k + 1) as f64 * width
            },
            count: 0,
        })
        .collect();
    let (mut below, mut above) = (0, 0);
    for &v in values {
        if v < lo {
            below += 1;
        } else if v > hi {
            above += 1;
        } else {
            let k = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
            bins[k].count += 1;
        }
    }
    Ok(Histogram {
        component: component.to_string(),
        bins,
        below,
        above,
    })
}

fn matrix_names(prefix: &str, d: usize) -> Vec<String> {
    (1..=d)
        .flat_map(|i| (1..=d).map(move |j| format!("{prefix}_{i}_{j}")))
        .collect()
}

fn column_names(d: usize) -> Vec<String> {
    let mut names = matrix_names("theta", d);
    names.extend((1..=d).map(|i| format!("b_{i}")));
    names.extend(matrix_names("sigma", d));
    names
}

fn flatten(e: &ReplicationEstimate) -> Vec<f64> {
    let d = e.b_hat.len();
    let mut v = Vec::with_capacity(2 * d * d + d);
    v.extend((0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|ij| e.theta_hat[ij]));
    v.extend(e.b_hat.iter().copied());
    v.extend((0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|ij| e.sigma_hat[ij]));
    v
}

/// Componentwise error summaries, Frobenius-norm summary for `Θ̂ − Θ` and
/// histogram bins, in a fixed component order (theta, b, sigma; row-major).
pub fn summarize(estimates: &[ReplicationEstimate], truth: &ModelParams) -> Result<McSummaries> {
    if estimates.is_empty() {
        return Err(Error::EmptyReport("no successful replications".into()));
    }
    let d = truth.dim();
    if estimates.iter().any(|e| e.b_hat.len() != d) {
        return Err(Error::Dimension("estimate dimension differs from truth".into()));
    }
    let names = column_names(d);
    let truth_flat = flatten(&ReplicationEstimate {
        replication: 0,
        theta_hat: truth.theta.clone(),
        b_hat: truth.b.clone(),
        sigma_hat: truth.sigma.clone(),
    });
    let errors: Vec<Vec<f64>> = estimates
        .iter()
        .map(|e| flatten(e).iter().zip(&truth_flat).map(|(a, b)| a - b).collect())
        .collect();
    let mut components = Vec::with_capacity(names.len());
    let mut histograms = Vec::with_capacity(names.len() + 1);
    for (k, name) in names.iter().enumerate() {
        let col: Vec<f64> = errors.iter().map(|row| row[k]).collect();
        components.push(ComponentSummary {
            component: name.clone(),
            error: summary(&col)?,
        });
        histograms.push(histogram(name, &col)?);
    }
    let frob: Vec<f64> = estimates
        .iter()
        .map(|e| (&e.theta_hat - &truth.theta).norm())
        .collect();
    histograms.push(histogram("theta_frobenius", &frob)?);
    Ok(McSummaries {
        components,
        theta_frobenius: summary(&frob)?,
        histograms,
    })
}

impl McReport {
    /// Per-replication table `replication,status,category,theta_1_1,...,b_1,...,sigma_1_1,...`.
    pub fn write_replications_csv<W: Write>(&self, writer: W) -> Result<()> {
        let d = self.metadata.params.dim();
        let names = column_names(d);
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["replication".to_string(), "status".into(), "category".into()];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        let mut rows_: Vec<(usize, Vec<String>)> = Vec::with_capacity(self.metadata.replications);
        for e in &self.estimates {
            let mut rec = vec![e.replication.to_string(), "ok".into(), String::new()];
            rec.extend(flatten(e).iter().map(|x| format!("{x:.16e}")));
            rows_.push((e.replication, rec));
        }
        for f in &self.failures {
            let mut rec = vec![f.replication.to_string(), "failed".into(), f.category.clone()];
            rec.extend(std::iter::repeat_n(String::new(), names.len()));
            rows_.push((f.replication, rec));
        }
        rows_.sort_by_key(|(j, _)| *j);
        for (_, rec) in rows_ {
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Histogram table `component,bin_left,bin_right,count`.
    pub fn write_histograms_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["component", "bin_left", "bin_right", "count"])?;
        for h in &self.summaries.histograms {
            for b in &h.bins {
                w.write_record([
                    h.component.clone(),
                    format!("{:.16e}", b.left),
                    format!("{:.16e}", b.right),
                    b.count.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
