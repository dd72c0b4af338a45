//! Euler–Maruyama simulation of `dr = Θ(b − r)dt + σ dX` and of its stationary
//! mean-zero counterpart `U`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{self, rows, Matrix, Vector, DEFAULT_RTOL};
use crate::noise::IncrementArray;

/// Mean-reversion matrix, mean level and noise scale of the rate model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    #[serde(with = "rows")]
    pub theta: Matrix,
    #[serde(with = "rows::vector")]
    pub b: Vector,
    #[serde(with = "rows")]
    pub sigma: Matrix,
}

impl ModelParams {
    pub fn new(theta: Matrix, b: Vector, sigma: Matrix) -> Result<Self> {
        let p = Self { theta, b, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.b.len();
        if self.theta.shape() != (d, d) || self.sigma.shape() != (d, d) {
            return Err(Error::Dimension(format!(
                "theta {:?} and sigma {:?} must both be {d}x{d}",
                self.theta.shape(),
                self.sigma.shape()
            )));
        }
        if !matcore::is_finite(&self.theta)
            || !matcore::is_finite(&self.sigma)
            || self.b.iter().any(|x| !x.is_finite())
        {
            return Err(Error::Config("model parameters must be finite".into()));
        }
        if !matcore::is_symmetric(&self.theta, DEFAULT_RTOL) {
            return Err(Error::Config("theta must be symmetric".into()));
        }
        if !matcore::is_spd(&self.theta, 0.0) {
            return Err(Error::Config("theta must be positive definite".into()));
        }
        for i in 0..d {
            for j in 0..d {
                let s = self.sigma[(i, j)];
                if i == j && !(s > 0.0) {
                    return Err(Error::Config(format!(
                        "sigma diagonal entry {i} must be > 0, got {s}"
                    )));
                }
                if i != j && s != 0.0 {
                    return Err(Error::Config("sigma must be diagonal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Diagonal example: `b = (0, 0)`, `Θ = diag(0.5, 0.3)`, `σ = I`.
    pub fn example_diagonal() -> Self {
        Self {
            theta: Matrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.3]),
            b: Vector::from_vec(vec![0.0, 0.0]),
            sigma: Matrix::identity(2, 2),
        }
    }

    /// Non-diagonal example: `b = (1, 3)`, `Θ = [[0.5, 0.1], [0.1, 0.3]]`, `σ = diag(1, 2)`.
    pub fn example_nondiagonal() -> Self {
        Self {
            theta: Matrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
            b: Vector::from_vec(vec![1.0, 3.0]),
            sigma: Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]),
        }
    }
}

/// Uniformly sampled path; column `k` of `values` is the state at `t0 + k·h`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathGrid {
    pub t0: f64,
    pub h: f64,
    pub values: Matrix,
}

impl PathGrid {
    pub fn new(t0: f64, h: f64, values: Matrix) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() || !t0.is_finite() {
            return Err(Error::Domain(format!("invalid grid t0={t0}, h={h}")));
        }
        if values.nrows() == 0 || values.ncols() < 2 {
            return Err(Error::InsufficientData(format!(
                "a path needs d >= 1 and at least 2 grid points, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if !matcore::is_finite(&values) {
            return Err(Error::Domain("path values must be finite".into()));
        }
        Ok(Self { t0, h, values })
    }

    pub fn d(&self) -> usize {
        self.values.nrows()
    }

    /// Number of steps `N` (the grid has `N + 1` points).
    pub fn steps(&self) -> usize {
        self.values.ncols() - 1
    }

    pub fn duration(&self) -> f64 {
        self.steps() as f64 * self.h
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.h
    }

    /// Path with `c` added to every column.
    pub fn shifted(&self, c: &Vector) -> Self {
        let mut values = self.values.clone();
        for mut col in values.column_iter_mut() {
            col += c;
        }
        Self {
            t0: self.t0,
            h: self.h,
            values,
        }
    }

    /// CSV with header `t,r1,...,rd`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.d()).map(|i| format!("r{i}")));
        w.write_record(&header)?;
        for k in 0..self.values.ncols() {
            let mut rec = Vec::with_capacity(self.d() + 1);
            rec.push(format!("{:.16e}", self.time(k)));
            rec.extend(self.values.column(k).iter().map(|x| format!("{x:.16e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV layout written by [`PathGrid::write_csv`]. The step is taken
    /// from the first two time stamps and the grid must be uniform.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 || &headers[0] != "t" {
            return Err(Error::Schema("path CSV header must be t,r1,...,rd".into()));
        }
        for (i, name) in headers.iter().skip(1).enumerate() {
            if name != format!("r{}", i + 1) {
                return Err(Error::Schema(format!(
                    "unexpected path column `{name}`, expected r{}",
                    i + 1
                )));
            }
        }
        let d = headers.len() - 1;
        let mut times = Vec::new();
        let mut data = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| {
                    Error::Parse(format!("path CSV row {}: `{s}`: {e}", line + 2))
                })
            };
            times.push(parse(&rec[0])?);
            for field in rec.iter().skip(1) {
                data.push(parse(field)?);
            }
        }
        if times.len() < 2 {
            return Err(Error::InsufficientData("path CSV needs at least 2 rows".into()));
        }
        let h = times[1] - times[0];
        if !(h > 0.0) {
            return Err(Error::Ordering("path time stamps must increase".into()));
        }
        let t0 = times[0];
        for (k, &t) in times.iter().enumerate() {
            let expected = t0 + k as f64 * h;
            if (t - expected).abs() > 1e-6 * h.max(expected.abs() * 1e-3) {
                return Err(Error::GridIncompatible(format!(
                    "path time stamps are not uniform at row {}",
                    k + 2
                )));
            }
        }
        let n = times.len();
        let values = Matrix::from_fn(d, n, |i, k| data[k * d + i]);
        Self::new(t0, h, values)
    }
}

/// Simulated path plus any non-fatal warnings raised during simulation.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub path: PathGrid,
    pub warnings: Vec<String>,
}

/// Explicit-Euler stiffness warning for `h·‖Θ‖₂ ≥ 2`.
pub fn stability_warning(theta: &Matrix, h: f64) -> Option<String> {
    let lmax = matcore::sym_eig(theta).map(|e| e.max_eigenvalue().abs()).unwrap_or(f64::INFINITY);
    (h * lmax >= 2.0).then(|| {
        format!("explicit Euler step is unstable: h·‖Θ‖ = {:.4} >= 2", h * lmax)
    })
}

fn check_dims(params: &ModelParams, inc: &IncrementArray, r0: &Vector) -> Result<()> {
    let d = params.dim();
    if inc.d() != d || r0.len() != d {
        return Err(Error::Dimension(format!(
            "model dimension {d}, increments dimension {}, initial value dimension {}",
            inc.d(),
            r0.len()
        )));
    }
    Ok(())
}

/// Euler recursion `r_{k+1} = r_k + Θ(b − r_k)h + σ ΔX_k` without parameter validation.
fn euler(theta: &Matrix, b: &Vector, sigma: &Matrix, inc: &IncrementArray, r0: &Vector) -> Matrix {
    let n = inc.len();
    let d = r0.len();
    let mut values = Matrix::zeros(d, n + 1);
    values.set_column(0, r0);
    let h = inc.h;
    let mut r = r0.clone();
    for k in 0..n {
        let drift = theta * (b - &r) * h;
        let shock = sigma * inc.values.column(k);
        r = &r + drift + shock;
        values.set_column(k + 1, &r);
    }
    values
}

/// Euler–Maruyama path driven by `inc`, starting at `r0`, on the grid step `inc.h`.
pub fn simulate_path(params: &ModelParams, inc: &IncrementArray, r0: &Vector) -> Result<Simulation> {
    params.validate()?;
    check_dims(params, inc, r0)?;
    let values = euler(&params.theta, &params.b, &params.sigma, inc, r0);
    if !matcore::is_finite(&values) {
        return Err(Error::Domain("simulated path overflowed".into()));
    }
    let warnings = stability_warning(&params.theta, inc.h).into_iter().collect();
    Ok(Simulation {
        path: PathGrid::new(0.0, inc.h, values)?,
        warnings,
    })
}

/// Smallest burn-in (in steps) with `e^{−λ_min(Θ)·burn_in·h} ≤ e^{−10}`.
pub fn min_burn_in(theta: &Matrix, h: f64) -> Result<usize> {
    let lmin = matcore::sym_eig(theta)?.min_eigenvalue();
    if !(lmin > 0.0) {
        return Err(Error::Config("theta must be positive definite".into()));
    }
    Ok((10.0 / (lmin * h) - 1e-9).ceil().max(1.0) as usize)
}

/// Approximate stationary `U` (the `b = 0` process) by running the recursion
/// from 0 and dropping the first `burn_in` steps.
pub fn simulate_stationary_u(
    params: &ModelParams,
    inc: &IncrementArray,
    burn_in: usize,
) -> Result<PathGrid> {
    params.validate()?;
    let d = params.dim();
    let zero = Vector::zeros(d);
    check_dims(params, inc, &zero)?;
    let needed = min_burn_in(&params.theta, inc.h)?;
    if burn_in < needed {
        return Err(Error::Config(format!(
            "burn_in = {burn_in} steps is too small: need at least {needed} so that burn_in·h >= 10/λ_min(Θ)"
        )));
    }
    if burn_in >= inc.len() {
        return Err(Error::InsufficientData(format!(
            "burn_in = {burn_in} leaves no samples out of {} increments",
            inc.len()
        )));
    }
    let full = euler(&params.theta, &zero, &params.sigma, inc, &zero);
    let kept = full.columns(burn_in, full.ncols() - burn_in).into_owned();
    PathGrid::new(burn_in as f64 * inc.h, inc.h, kept)
}

/// Propagator used in [`coupling_residual`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Propagator {
    /// `(I − hΘ)^k`, exact for the Euler scheme.
    Discrete,
    /// `e^{−Θ t_k}`, exact for the continuous-time model.
    Continuous,
}

/// `max_k ‖r_k − [P_k (r0 − U0 − b) + b + U_k]‖₂` for `r` and `U` driven by the
/// same increments.
pub fn coupling_residual(
    params: &ModelParams,
    inc: &IncrementArray,
    r0: &Vector,
    u0: &Vector,
    propagator: Propagator,
) -> Result<f64> {
    params.validate()?;
    check_dims(params, inc, r0)?;
    check_dims(params, inc, u0)?;
    let d = params.dim();
    let zero = Vector::zeros(d);
    let r = euler(&params.theta, &params.b, &params.sigma, inc, r0);
    let u = euler(&params.theta, &zero, &params.sigma, inc, u0);
    let gap0 = r0 - u0 - &params.b;
    let step = match propagator {
        Propagator::Discrete => Matrix::identity(d, d) - &params.theta * inc.h,
        Propagator::Continuous => matcore::mat_exp(&(&params.theta * -inc.h))?,
    };
    let mut gap = gap0;
    let mut worst = 0.0f64;
    for k in 0..r.ncols() {
        let predicted = &gap + &params.b + u.column(k);
        worst = worst.max((r.column(k) - predicted).norm());
        gap = &step * gap;
    }
    Ok(worst)
}
