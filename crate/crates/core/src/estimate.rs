//! Moment estimators for `(b, γ, σσᵀ, Θ)` from a uniformly sampled path.
//!
//! Time integrals use the trapezoidal rule on the observation grid. Lagged
//! covariances share one window `[0, T]` with `T = duration − (largest lag)` so
//! that every lag sees the same data, and the `B̂, Ĉ, D̂` integrals run over
//! `[0, t_upper]` on the lag grid.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{self, rows, Matrix, Vector, DEFAULT_CLIP_EPS};
use crate::noise::NoiseSpec;
use crate::riccati::{self, CareProblem, SolverBranch, DEFAULT_CARE_TOL};
use crate::simulate::PathGrid;

/// Relative slack when matching lags and grid points.
const GRID_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QvWindow {
    /// Every increment of the path, normalized by `V(h)`.
    #[default]
    AllIncrements,
    /// Only the increments inside `[t0, t0 + 1]`; requires `1/h` to be an integer.
    UnitInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationConfig {
    /// Upper limit `t` of the `B̂, Ĉ, D̂` integrals (time units).
    pub t_upper: f64,
    /// Lag grid spacing; `None` uses the path step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lag_step: Option<f64>,
    pub qv_window: QvWindow,
    pub clip_eps: f64,
    pub care_tol: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            t_upper: 5.0,
            lag_step: None,
            qv_window: QvWindow::AllIncrements,
            clip_eps: DEFAULT_CLIP_EPS,
            care_tol: DEFAULT_CARE_TOL,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_upper > 0.0) || !self.t_upper.is_finite() {
            return Err(Error::Config(format!(
                "estimation.t_upper must be > 0, got {}",
                self.t_upper
            )));
        }
        if let Some(ls) = self.lag_step {
            if !(ls > 0.0) || !ls.is_finite() {
                return Err(Error::Config(format!("estimation.lag_step must be > 0, got {ls}")));
            }
        }
        if !(self.clip_eps >= 0.0) {
            return Err(Error::Config("estimation.clip_eps must be >= 0".into()));
        }
        if !(self.care_tol > 0.0) {
            return Err(Error::Config("estimation.care_tol must be > 0".into()));
        }
        Ok(())
    }

    /// Lag grid spacing as a whole number of path steps.
    fn lag_stride(&self, h: f64) -> Result<(f64, usize)> {
        let ls = self.lag_step.unwrap_or(h);
        let ratio = ls / h;
        let stride = ratio.round();
        if stride < 1.0 || (ratio - stride).abs() > GRID_RTOL * ratio.max(1.0) {
            return Err(Error::GridIncompatible(format!(
                "lag_step {ls} is not a positive integer multiple of the path step {h}"
            )));
        }
        Ok((ls, stride as usize))
    }
}

/// `γ̂(j·lag_step)` for `j = 0..=M`, where `M·lag_step` is the first grid lag at
/// or beyond `t_upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagCovariance {
    pub lag_step: f64,
    pub t_upper: f64,
    /// Length `T` of the averaging window shared by all lags.
    pub window: f64,
    #[serde(with = "rows::list")]
    pub values: Vec<Matrix>,
}

impl LagCovariance {
    /// Tabulates a known covariance function on the lag grid covering `[0, t_upper]`.
    pub fn from_fn(lag_step: f64, t_upper: f64, f: impl Fn(f64) -> Matrix) -> Self {
        let m = lag_count(t_upper, lag_step);
        Self {
            lag_step,
            t_upper,
            window: f64::INFINITY,
            values: (0..=m).map(|j| f(j as f64 * lag_step)).collect(),
        }
    }

    pub fn d(&self) -> usize {
        self.values[0].nrows()
    }

    /// `γ̂(s)`, linearly interpolated between lag nodes; negative lags use
    /// `γ̂(−s) = γ̂(s)ᵀ`.
    pub fn at(&self, s: f64) -> Matrix {
        if s < 0.0 {
            return self.at(-s).transpose();
        }
        let x = s / self.lag_step;
        let j = x.floor();
        let last = self.values.len() - 1;
        if (x - x.round()).abs() <= GRID_RTOL * x.max(1.0) {
            let k = (x.round() as usize).min(last);
            return self.values[k].clone();
        }
        let j = (j as usize).min(last - 1);
        let w = x - j as f64;
        &self.values[j] * (1.0 - w) + &self.values[j + 1] * w
    }

    /// CSV with one row per lag: `lag,g11,g12,...,gdd` (row-major entries).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let d = self.d();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["lag".to_string()];
        for i in 1..=d {
            for j in 1..=d {
                header.push(format!("g{i}{j}"));
            }
        }
        w.write_record(&header)?;
        for (k, g) in self.values.iter().enumerate() {
            let mut rec = vec![format!("{:.16e}", k as f64 * self.lag_step)];
            for i in 0..d {
                for j in 0..d {
                    rec.push(format!("{:.16e}", g[(i, j)]));
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn lag_count(t_upper: f64, lag_step: f64) -> usize {
    let x = t_upper / lag_step;
    (x - GRID_RTOL * x.max(1.0)).ceil().max(1.0) as usize
}

/// Trapezoidal mean of columns `0..=w` of `y`, as a vector.
fn trapezoid_mean(y: &Matrix, w: usize) -> Vector {
    let mut acc = (y.column(0) + y.column(w)) * 0.5;
    for k in 1..w {
        acc += y.column(k);
    }
    acc / w as f64
}

/// `(1/T) ∫₀ᵀ r_s ds` over the whole path.
pub fn estimate_b(path: &PathGrid) -> Vector {
    let r0 = path.values.column(0).into_owned();
    let y = centered_on(&path.values, &r0);
    r0 + trapezoid_mean(&y, path.steps())
}

fn centered_on(values: &Matrix, c: &Vector) -> Matrix {
    let mut y = values.clone();
    for mut col in y.column_iter_mut() {
        col -= c;
    }
    y
}

/// Lagged covariance estimates on the lag grid of `cfg`.
pub fn estimate_gamma(path: &PathGrid, cfg: &EstimationConfig) -> Result<LagCovariance> {
    cfg.validate()?;
    let h = path.h;
    let (lag_step, stride) = cfg.lag_stride(h)?;
    let m = lag_count(cfg.t_upper, lag_step);
    let max_shift = m * stride;
    let n = path.steps();
    if !(path.duration() > 2.0 * cfg.t_upper) || max_shift >= n {
        return Err(Error::InsufficientData(format!(
            "path duration {} must exceed 2·t_upper = {} and the largest lag {}",
            path.duration(),
            2.0 * cfg.t_upper,
            max_shift as f64 * h
        )));
    }
    let w = n - max_shift;
    let r0 = path.values.column(0).into_owned();
    let y = centered_on(&path.values, &r0);
    let mean = trapezoid_mean(&y, w);
    let z = centered_on(&y, &mean);

    let d = path.d();
    let values = (0..=m)
        .map(|j| {
            let shift = j * stride;
            let mut acc = Matrix::zeros(d, d);
            for k in 0..=w {
                let weight = if k == 0 || k == w { 0.5 } else { 1.0 };
                let lead = z.column(k + shift);
                let lag = z.column(k);
                for a in 0..d {
                    let la = weight * lead[a];
                    for b in 0..d {
                        acc[(a, b)] += la * lag[b];
                    }
                }
            }
            acc / w as f64
        })
        .collect();
    Ok(LagCovariance {
        lag_step,
        t_upper: cfg.t_upper,
        window: w as f64 * h,
        values,
    })
}

/// Quadratic-variation estimate `V(h)^{-1} (1/n) Σ Δr Δrᵀ`, symmetrized.
pub fn estimate_sigma_sq(path: &PathGrid, spec: &NoiseSpec, cfg: &EstimationConfig) -> Result<Matrix> {
    Ok(sigma_sq_with_count(path, spec, cfg)?.0)
}

fn sigma_sq_with_count(
    path: &PathGrid,
    spec: &NoiseSpec,
    cfg: &EstimationConfig,
) -> Result<(Matrix, usize)> {
    spec.validate()?;
    if spec.d != path.d() {
        return Err(Error::Dimension(format!(
            "noise dimension {} does not match path dimension {}",
            spec.d,
            path.d()
        )));
    }
    let h = path.h;
    let count = match cfg.qv_window {
        QvWindow::AllIncrements => path.steps(),
        QvWindow::UnitInterval => {
            let per_unit = 1.0 / h;
            let k = per_unit.round();
            if k < 1.0 || (per_unit - k).abs() > GRID_RTOL * per_unit.max(1.0) {
                return Err(Error::GridIncompatible(format!(
                    "unit-interval quadratic variation needs 1/h to be an integer, h = {h}"
                )));
            }
            let k = k as usize;
            if k > path.steps() {
                return Err(Error::InsufficientData(format!(
                    "unit-interval quadratic variation needs {k} increments, path has {}",
                    path.steps()
                )));
            }
            k
        }
    };
    let v = spec.variance(h)?;
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::Singular(format!(
            "noise covariance V(h) = {v}·I is not invertible at h = {h}"
        )));
    }
    let d = path.d();
    let mut acc = Matrix::zeros(d, d);
    for k in 0..count {
        let dr = path.values.column(k + 1) - path.values.column(k);
        acc += &dr * dr.transpose();
    }
    Ok((matcore::symmetrize(&(acc / (count as f64 * v))), count))
}

/// Coefficient matrices of the Riccati equation.
#[derive(Debug, Clone, PartialEq)]
pub struct Bcd {
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
}

/// Trapezoid of `weight(s)·γ̂(s)` over `[0, t]` on the lag nodes, with a final
/// partial panel when `t` falls between nodes.
fn lag_integral(gamma: &LagCovariance, t: f64, weight: impl Fn(f64) -> f64) -> Matrix {
    let ls = gamma.lag_step;
    let m = lag_count(t, ls);
    let mut nodes: Vec<(f64, Matrix)> = (0..m).map(|j| (j as f64 * ls, gamma.values[j].clone())).collect();
    nodes.push((t, gamma.at(t)));
    let d = gamma.d();
    let mut acc = Matrix::zeros(d, d);
    for pair in nodes.windows(2) {
        let (s0, g0) = (&pair[0].0, &pair[0].1);
        let (s1, g1) = (&pair[1].0, &pair[1].1);
        acc += (g0 * weight(*s0) + g1 * weight(*s1)) * (0.5 * (s1 - s0));
    }
    acc
}

/// `B̂ = ∫₀ᵗ (γ̂ − γ̂ᵀ)`, `Ĉ = 2∫₀ᵗ (t − s) sym γ̂(s) ds`,
/// `D̂ = V(t)·σ̂σ̂ᵀ − (2γ̂(0) − γ̂(t) − γ̂(t)ᵀ)`.
pub fn build_bcd(
    gamma: &LagCovariance,
    sigma_sq: &Matrix,
    spec: &NoiseSpec,
    t_upper: f64,
) -> Result<Bcd> {
    let d = gamma.d();
    if sigma_sq.shape() != (d, d) || spec.d != d {
        return Err(Error::Dimension(format!(
            "γ̂ is {d}x{d}, σ̂σ̂ᵀ is {:?}, noise dimension {}",
            sigma_sq.shape(),
            spec.d
        )));
    }
    let covered = (gamma.values.len() - 1) as f64 * gamma.lag_step;
    if t_upper > covered * (1.0 + GRID_RTOL) {
        return Err(Error::InsufficientData(format!(
            "lag grid covers [0, {covered}], integrals need [0, {t_upper}]"
        )));
    }
    let a = lag_integral(gamma, t_upper, |_| 1.0);
    let b = &a - a.transpose();
    let w = lag_integral(gamma, t_upper, |s| t_upper - s);
    let c = &w + w.transpose();
    let v = spec.variance(t_upper)?;
    let noise = matcore::symmetrize(&(sigma_sq * v));
    let g0 = matcore::symmetrize(&gamma.values[0]);
    let gt = gamma.at(t_upper);
    let gt_sym = &gt + gt.transpose();
    let d_mat = noise - (g0 * 2.0 - gt_sym);
    Ok(Bcd { b, c, d: d_mat })
}

/// Pipeline diagnostics. Fields are filled as stages complete, so a failed fit
/// still reports how far it got.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub h: f64,
    pub steps: usize,
    pub duration: f64,
    pub t_upper: f64,
    pub lag_step: Option<f64>,
    pub lag_count: Option<usize>,
    pub effective_window: Option<f64>,
    pub qv_window: QvWindow,
    pub qv_increments: Option<usize>,
    pub sigma_sq_min_eigenvalue: Option<f64>,
    pub sigma_clipped: Option<bool>,
    pub c_min_eigenvalue: Option<f64>,
    pub d_min_eigenvalue: Option<f64>,
    pub solver_branch: Option<SolverBranch>,
    pub newton_iterations: Option<usize>,
    pub theta_min_eigenvalue: Option<f64>,
    pub care_residual_bound: Option<f64>,
    pub failure: Option<String>,
    pub failure_category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    #[serde(with = "rows")]
    pub theta_hat: Matrix,
    #[serde(with = "rows::vector")]
    pub b_hat: Vector,
    #[serde(with = "rows")]
    pub sigma_hat: Matrix,
    #[serde(with = "rows")]
    pub sigma_sq_hat: Matrix,
    #[serde(rename = "B_hat", with = "rows")]
    pub b_mat: Matrix,
    #[serde(rename = "C_hat", with = "rows")]
    pub c_mat: Matrix,
    #[serde(rename = "D_hat", with = "rows")]
    pub d_mat: Matrix,
    pub care_residual: f64,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    /// `‖B̂ᵀΘ̂ + Θ̂B̂ − Θ̂ĈΘ̂ + D̂‖_F` from the stored matrices.
    pub fn recompute_residual(&self) -> f64 {
        riccati::care_residual(&self.b_mat, &self.c_mat, &self.d_mat, &self.theta_hat).norm()
    }

    pub fn dim(&self) -> usize {
        self.b_hat.len()
    }
}

/// Runs the full estimator and always returns the diagnostics gathered so far.
pub fn fit_with_diagnostics(
    path: &PathGrid,
    spec: &NoiseSpec,
    cfg: &EstimationConfig,
) -> (Result<FitResult>, FitDiagnostics) {
    let mut diag = FitDiagnostics {
        h: path.h,
        steps: path.steps(),
        duration: path.duration(),
        t_upper: cfg.t_upper,
        qv_window: cfg.qv_window,
        ..Default::default()
    };
    let res = fit_stages(path, spec, cfg, &mut diag);
    if let Err(e) = &res {
        diag.failure = Some(e.to_string());
        diag.failure_category = Some(e.category().to_string());
    }
    let res = res.map(|mut fit| {
        fit.diagnostics = diag.clone();
        fit
    });
    (res, diag)
}

pub fn fit(path: &PathGrid, spec: &NoiseSpec, cfg: &EstimationConfig) -> Result<FitResult> {
    fit_with_diagnostics(path, spec, cfg).0
}

fn fit_stages(
    path: &PathGrid,
    spec: &NoiseSpec,
    cfg: &EstimationConfig,
    diag: &mut FitDiagnostics,
) -> Result<FitResult> {
    cfg.validate()?;
    spec.validate()?;
    if spec.d != path.d() {
        return Err(Error::Dimension(format!(
            "noise dimension {} does not match path dimension {}",
            spec.d,
            path.d()
        )));
    }
    let b_hat = estimate_b(path);
    let gamma = estimate_gamma(path, cfg)?;
    diag.lag_step = Some(gamma.lag_step);
    diag.lag_count = Some(gamma.values.len());
    diag.effective_window = Some(gamma.window);

    let (sigma_sq, count) = sigma_sq_with_count(path, spec, cfg)?;
    diag.qv_increments = Some(count);
    let root = matcore::sym_sqrt_pd(&sigma_sq, cfg.clip_eps)?;
    diag.sigma_sq_min_eigenvalue = Some(root.min_eigenvalue);
    diag.sigma_clipped = Some(root.clipped);

    let bcd = build_bcd(&gamma, &sigma_sq, spec, cfg.t_upper)?;
    diag.c_min_eigenvalue = matcore::min_sym_eigenvalue(&bcd.c);
    diag.d_min_eigenvalue = matcore::min_sym_eigenvalue(&bcd.d);
    if gamma.values[0].amax() == 0.0 {
        return Err(Error::Degenerate(
            "path has zero sample variance; γ̂ vanishes at every lag".into(),
        ));
    }

    let problem = CareProblem::new(&bcd.b, &bcd.c, &bcd.d, cfg.care_tol)?;
    let sol = riccati::care_solve(&problem)?;
    diag.solver_branch = Some(sol.branch);
    diag.newton_iterations = Some(sol.newton_iterations);
    diag.theta_min_eigenvalue = Some(sol.min_eigenvalue);
    diag.care_residual_bound = Some(sol.residual_bound);

    let fit = FitResult {
        theta_hat: sol.theta,
        b_hat,
        sigma_hat: root.root,
        sigma_sq_hat: sigma_sq,
        b_mat: bcd.b,
        c_mat: bcd.c,
        d_mat: bcd.d,
        care_residual: 0.0,
        diagnostics: FitDiagnostics::default(),
    };
    Ok(FitResult {
        care_residual: fit.recompute_residual(),
        ..fit
    })
}
