//! Observed rate series: CSV ingestion, one-step prediction over a holdout
//! segment and recovery of the driving noise increments.

use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::FitResult;
use crate::matcore::{self, Matrix, Vector};
use crate::noise::IncrementArray;
use crate::simulate::PathGrid;

/// Default minimum number of usable rows after dropping gaps.
pub const MIN_ROWS: usize = 10;

/// Default share of the series held out for prediction (the last fifth).
pub const DEFAULT_HOLDOUT: f64 = 0.2;

/// Cell contents treated as a missing observation.
const MISSING: [&str; 5] = ["", ".", "NA", "NaN", "nan"];

/// Reference estimates for the daily Euribor / federal funds series with
/// `H = 0.7`. They apply only to that data under the same configuration.
pub mod reference {
    pub const HURST: f64 = 0.7;
    pub const THETA: [[f64; 2]; 2] = [[0.007998, -0.005324], [-0.005324, 0.019277]];
    pub const SIGMA_DIAG: [f64; 2] = [0.02053, 0.083129];
    pub const B: [f64; 2] = [1.554624, 2.068773];
    pub const OBSERVATIONS: usize = 6765;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateSeries {
    pub labels: Vec<String>,
    pub dates: Vec<NaiveDate>,
    /// `d × (N+1)`, column `k` observed on `dates[k]`.
    pub values: Matrix,
    /// Model time per observation row.
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub rows_read: usize,
    pub rows_dropped: usize,
}

impl RateSeries {
    pub fn d(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn to_path(&self) -> Result<PathGrid> {
        PathGrid::new(0.0, self.h, self.values.clone())
    }

    /// Index of the first holdout row: the last `round(fraction·len)` rows,
    /// at least one, are held out and at least two rows remain for training.
    pub fn holdout_start(&self, fraction: f64) -> Result<usize> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Config(format!(
                "holdout fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let n = self.len();
        let held = ((fraction * n as f64).round() as usize).max(1);
        if n < held + 2 {
            return Err(Error::InsufficientData(format!(
                "{n} rows leave no training segment for a holdout of {held}"
            )));
        }
        Ok(n - held)
    }

    /// Rows before `end`, e.g. the training segment ahead of a holdout.
    pub fn head(&self, end: usize) -> Self {
        Self {
            labels: self.labels.clone(),
            dates: self.dates[..end].to_vec(),
            values: self.values.columns(0, end).into_owned(),
            h: self.h,
        }
    }
}

fn is_missing(cell: &str) -> bool {
    MISSING.contains(&cell)
}

/// Reads a header-led CSV with one ISO-8601 date column and the named value
/// columns. Rows with any missing value are dropped and counted.
pub fn load_csv<R: Read>(
    source: R,
    date_column: &str,
    value_columns: &[String],
    h: f64,
    min_rows: usize,
) -> Result<(RateSeries, ParseReport)> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Config(format!("h must be > 0, got {h}")));
    }
    if value_columns.is_empty() {
        return Err(Error::Config("at least one value column is required".into()));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
    };
    let date_idx = find(date_column)?;
    let value_idx = value_columns.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let mut dates = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let mut report = ParseReport { rows_read: 0, rows_dropped: 0 };
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        report.rows_read += 1;
        let row = line + 2;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let raw_date = cell(date_idx);
        if raw_date.is_empty() {
            report.rows_dropped += 1;
            continue;
        }
        let date: NaiveDate = raw_date
            .parse()
            .map_err(|e| Error::Parse(format!("row {row}: bad date '{raw_date}': {e}")))?;
        if value_idx.iter().any(|&i| is_missing(cell(i))) {
            report.rows_dropped += 1;
            continue;
        }
        let mut row_vals = Vec::with_capacity(value_idx.len());
        for (&i, name) in value_idx.iter().zip(value_columns) {
            let v: f64 = cell(i).parse().map_err(|_| {
                Error::Parse(format!("row {row}: column '{name}' is not numeric: '{}'", cell(i)))
            })?;
            if !v.is_finite() {
                return Err(Error::Parse(format!("row {row}: column '{name}' is not finite")));
            }
            row_vals.push(v);
        }
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(Error::Ordering(format!(
                    "row {row}: date {date} does not follow {prev}"
                )));
            }
        }
        dates.push(date);
        data.extend(row_vals);
    }
    let usable = dates.len();
    if usable < min_rows.max(2) {
        return Err(Error::InsufficientData(format!(
            "{usable} usable rows after dropping {} with gaps; need at least {}",
            report.rows_dropped,
            min_rows.max(2)
        )));
    }
    let d = value_columns.len();
    // data is row-major (one observation per row) which is column-major for d × n
    let values = Matrix::from_column_slice(d, usable, &data);
    Ok((
        RateSeries {
            labels: value_columns.to_vec(),
            dates,
            values,
            h,
        },
        report,
    ))
}

/// `r̂_{k+1} = b + e^{−Θh}(r_k − b)`: the drift propagated over one step with
/// the noise set to its zero mean.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepPredictor {
    pub b: Vector,
    pub propagator: Matrix,
}

impl OneStepPredictor {
    pub fn new(theta: &Matrix, b: &Vector, h: f64) -> Result<Self> {
        if theta.nrows() != b.len() || !theta.is_square() {
            return Err(Error::Dimension(format!(
                "theta is {}x{} but b has length {}",
                theta.nrows(),
                theta.ncols(),
                b.len()
            )));
        }
        let propagator = matcore::mat_exp(&(theta * -h))?;
        Ok(Self { b: b.clone(), propagator })
    }

    pub fn from_fit(fit: &FitResult, h: f64) -> Result<Self> {
        Self::new(&fit.theta_hat, &fit.b_hat, h)
    }

    pub fn predict(&self, r: &Vector) -> Vector {
        &self.b + &self.propagator * (r - &self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub labels: Vec<String>,
    pub holdout_fraction: f64,
    pub holdout_rows: usize,
    pub first_holdout_date: NaiveDate,
    pub h: f64,
    pub rmse: Vec<f64>,
    pub mae: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionReport {
    pub labels: Vec<String>,
    pub holdout_fraction: f64,
    pub h: f64,
    pub dates: Vec<NaiveDate>,
    /// `d × m` observed holdout values.
    pub actual: Matrix,
    /// `d × m` predictions, column `j` built from the observation before it.
    pub predicted: Matrix,
    pub rmse: Vec<f64>,
    pub mae: Vec<f64>,
}

impl PredictionReport {
    pub fn metrics(&self) -> PredictionMetrics {
        PredictionMetrics {
            labels: self.labels.clone(),
            holdout_fraction: self.holdout_fraction,
            holdout_rows: self.dates.len(),
            first_holdout_date: self.dates[0],
            h: self.h,
            rmse: self.rmse.clone(),
            mae: self.mae.clone(),
        }
    }

    /// Table `date,actual_1,pred_1,...,actual_d,pred_d`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let d = self.actual.nrows();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_string()];
        for i in 1..=d {
            header.push(format!("actual_{i}"));
            header.push(format!("pred_{i}"));
        }
        w.write_record(&header)?;
        for (j, date) in self.dates.iter().enumerate() {
            let mut rec = vec![date.to_string()];
            for i in 0..d {
                rec.push(format!("{:.16e}", self.actual[(i, j)]));
                rec.push(format!("{:.16e}", self.predicted[(i, j)]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One-step predictions over the last `holdout_fraction` of the series.
pub fn predict_with(
    predictor: &OneStepPredictor,
    series: &RateSeries,
    holdout_fraction: f64,
) -> Result<PredictionReport> {
    let d = series.d();
    if predictor.b.len() != d {
        return Err(Error::Dimension(format!(
            "predictor dimension {} does not match series dimension {d}",
            predictor.b.len()
        )));
    }
    let start = series.holdout_start(holdout_fraction)?;
    let m = series.len() - start;
    let actual = series.values.columns(start, m).into_owned();
    let mut predicted = Matrix::zeros(d, m);
    for j in 0..m {
        let prev: Vector = series.values.column(start + j - 1).into_owned();
        predicted.set_column(j, &predictor.predict(&prev));
    }
    let err = &predicted - &actual;
    let rmse = (0..d)
        .map(|i| (err.row(i).iter().map(|e| e * e).sum::<f64>() / m as f64).sqrt())
        .collect();
    let mae = (0..d)
        .map(|i| err.row(i).iter().map(|e| e.abs()).sum::<f64>() / m as f64)
        .collect();
    Ok(PredictionReport {
        labels: series.labels.clone(),
        holdout_fraction,
        h: series.h,
        dates: series.dates[start..].to_vec(),
        actual,
        predicted,
        rmse,
        mae,
    })
}

pub fn predict_one_step(
    fit: &FitResult,
    series: &RateSeries,
    holdout_fraction: f64,
) -> Result<PredictionReport> {
    if fit.dim() != series.d() {
        return Err(Error::Dimension(format!(
            "fit dimension {} does not match series dimension {}",
            fit.dim(),
            series.d()
        )));
    }
    predict_with(&OneStepPredictor::from_fit(fit, series.h)?, series, holdout_fraction)
}

/// Inverts the Euler recursion: `ΔX̂_k = σ⁻¹(Δr_k − Θ(b − r_k)h)`.
pub fn increments_from_path(
    theta: &Matrix,
    b: &Vector,
    sigma: &Matrix,
    path: &PathGrid,
    clip_eps: f64,
) -> Result<IncrementArray> {
    let d = path.d();
    if theta.nrows() != d || b.len() != d || sigma.nrows() != d {
        return Err(Error::Dimension("parameters do not match the path dimension".into()));
    }
    let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || sigma[(i, j)] == 0.0));
    let singular = if diagonal {
        (0..d).any(|i| !(sigma[(i, i)].abs() > clip_eps))
    } else {
        sigma.singular_values().min() <= clip_eps
    };
    if singular {
        return Err(Error::Singular(format!(
            "sigma has a singular value <= {clip_eps}; increments cannot be recovered"
        )));
    }
    let lu = sigma.clone().lu();
    let n = path.steps();
    let h = path.h;
    let mut out = Matrix::zeros(d, n);
    for k in 0..n {
        let r = path.values.column(k).into_owned();
        let drift = theta * (b - &r) * h;
        let shock = path.values.column(k + 1) - r - drift;
        let dx = if diagonal {
            Vector::from_iterator(d, (0..d).map(|i| shock[i] / sigma[(i, i)]))
        } else {
            lu.solve(&shock).ok_or_else(|| Error::Singular("sigma is singular".into()))?
        };
        out.set_column(k, &dx);
    }
    IncrementArray::new(h, out)
}

pub fn extract_increments(fit: &FitResult, series: &RateSeries) -> Result<IncrementArray> {
    if fit.dim() != series.d() {
        return Err(Error::Dimension(format!(
            "fit dimension {} does not match series dimension {}",
            fit.dim(),
            series.d()
        )));
    }
    increments_from_path(
        &fit.theta_hat,
        &fit.b_hat,
        &fit.sigma_hat,
        &series.to_path()?,
        matcore::DEFAULT_CLIP_EPS,
    )
}
