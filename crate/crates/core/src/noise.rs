//! Stationary-increment noise drivers with independent components.
//!
//! Every generator is a pure function of `(spec, N, h, seed)`. Component `i` of
//! replication `j` draws from its own ChaCha substream derived from
//! `(master_seed, j, i)`, so results do not depend on scheduling.

use nalgebra::Cholesky;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::Matrix;

/// Largest grid handled by the Cholesky fallback for fBm synthesis.
pub const CHOLESKY_MAX_POINTS: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Brownian,
    Fbm,
    CompoundPoisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hurst: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jump_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jump_std: Option<f64>,
}

impl NoiseSpec {
    pub fn brownian(d: usize) -> Self {
        Self {
            kind: NoiseKind::Brownian,
            d,
            hurst: None,
            jump_rate: None,
            jump_std: None,
        }
    }

    pub fn fbm(d: usize, hurst: f64) -> Self {
        Self {
            kind: NoiseKind::Fbm,
            d,
            hurst: Some(hurst),
            jump_rate: None,
            jump_std: None,
        }
    }

    pub fn compound_poisson(d: usize, jump_rate: f64, jump_std: f64) -> Self {
        Self {
            kind: NoiseKind::CompoundPoisson,
            d,
            hurst: None,
            jump_rate: Some(jump_rate),
            jump_std: Some(jump_std),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("noise.d must be a positive integer".into()));
        }
        let positive = |name: &str, v: Option<f64>| -> Result<f64> {
            match v {
                Some(x) if x.is_finite() && x > 0.0 => Ok(x),
                Some(x) => Err(Error::Config(format!("noise.{name} must be > 0, got {x}"))),
                None => Err(Error::Config(format!("noise.{name} is required for this kind"))),
            }
        };
        match self.kind {
            NoiseKind::Fbm => match self.hurst {
                Some(h) if h > 0.0 && h < 1.0 => {}
                Some(h) => {
                    return Err(Error::Config(format!(
                        "noise.hurst must lie in (0, 1), got {h}"
                    )))
                }
                None => return Err(Error::Config("noise.hurst is required for fbm".into())),
            },
            _ if self.hurst.is_some() => {
                return Err(Error::Config("noise.hurst is only valid for kind fbm".into()))
            }
            _ => {}
        }
        match self.kind {
            NoiseKind::CompoundPoisson => {
                positive("jump_rate", self.jump_rate)?;
                positive("jump_std", self.jump_std)?;
            }
            _ if self.jump_rate.is_some() || self.jump_std.is_some() => {
                return Err(Error::Config(
                    "noise.jump_rate/jump_std are only valid for kind compound_poisson".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }

    /// Self-similarity exponent: `H` for fBm, 1/2 otherwise.
    pub fn hurst_exponent(&self) -> f64 {
        match self.kind {
            NoiseKind::Fbm => self.hurst.unwrap_or(0.5),
            _ => 0.5,
        }
    }

    /// Per-component variance of `X_t`; the full covariance is this times `I`.
    pub fn variance(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::Domain(format!("time must be finite and >= 0, got {t}")));
        }
        Ok(match self.kind {
            NoiseKind::Brownian => t,
            NoiseKind::Fbm => t.powf(2.0 * self.hurst_exponent()),
            NoiseKind::CompoundPoisson => {
                let std = self.jump_std.unwrap_or(1.0);
                self.jump_rate.unwrap_or(1.0) * std * std * t
            }
        })
    }
}

/// Exact covariance `V(t) = Cov(X_t)`.
pub fn cov_v(spec: &NoiseSpec, t: f64) -> Result<Matrix> {
    spec.validate()?;
    let v = spec.variance(t)?;
    Ok(Matrix::identity(spec.d, spec.d) * v)
}

/// Increments of the noise on a uniform grid: column `k` is `X_{t_{k+1}} - X_{t_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementArray {
    pub h: f64,
    pub values: Matrix,
}

impl IncrementArray {
    pub fn new(h: f64, values: Matrix) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Domain(format!("grid step must be > 0, got {h}")));
        }
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Dimension("increment array must be non-empty".into()));
        }
        Ok(Self { h, values })
    }

    pub fn zeros(d: usize, n: usize, h: f64) -> Self {
        Self {
            h,
            values: Matrix::zeros(d, n),
        }
    }

    pub fn d(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    /// Noise path on the grid, `X_0 = 0`, as a `d x (N+1)` matrix.
    pub fn cumulative(&self) -> Matrix {
        let (d, n) = self.values.shape();
        let mut x = Matrix::zeros(d, n + 1);
        for k in 0..n {
            for i in 0..d {
                x[(i, k + 1)] = x[(i, k)] + self.values[(i, k)];
            }
        }
        x
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic RNG for component `component` of replication `replication`.
pub fn substream_rng(master: u64, replication: u64, component: u64) -> ChaCha12Rng {
    let mut state = master;
    let a = splitmix64(&mut state);
    let mut state = a ^ replication.rotate_left(17);
    let b = splitmix64(&mut state);
    let mut state = b ^ component.rotate_left(41) ^ 0xD1B5_4A32_D192_ED03;
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(seed)
}

/// Autocovariance of unit-step fractional Gaussian noise at lag `k`.
pub fn fgn_autocovariance(hurst: f64, k: usize) -> f64 {
    let two_h = 2.0 * hurst;
    let k = k as f64;
    0.5 * ((k + 1.0).powf(two_h) - 2.0 * k.powf(two_h) + (k - 1.0).abs().powf(two_h))
}

/// Eigenvalues of the minimal circulant embedding of the unit-step fGn covariance.
fn circulant_eigenvalues(n: usize, hurst: f64) -> Vec<f64> {
    let m = 2 * n;
    let mut row: Vec<Complex<f64>> = (0..m)
        .map(|k| {
            let lag = if k <= n { k } else { m - k };
            Complex::new(fgn_autocovariance(hurst, lag), 0.0)
        })
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(m).process(&mut row);
    row.into_iter().map(|c| c.re).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgnMethod {
    Circulant,
    Cholesky,
}

/// Unit-step fGn of length `n` by circulant embedding.
fn fgn_circulant(n: usize, hurst: f64, rng: &mut impl Rng) -> std::result::Result<Vec<f64>, String> {
    let eigenvalues = circulant_eigenvalues(n, hurst);
    let m = eigenvalues.len();
    let max = eigenvalues.iter().copied().fold(0.0, f64::max);
    let floor = -1e-10 * max.max(1.0);
    if let Some(bad) = eigenvalues.iter().find(|&&l| l < floor) {
        return Err(format!(
            "circulant embedding has a negative eigenvalue {bad:e} (H = {hurst}, N = {n})"
        ));
    }
    let scale = 1.0 / m as f64;
    let mut w: Vec<Complex<f64>> = eigenvalues
        .iter()
        .map(|&l| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            Complex::new(a, b) * (l.max(0.0) * scale).sqrt()
        })
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(m).process(&mut w);
    Ok(w.into_iter().take(n).map(|c| c.re).collect())
}

/// Unit-step fGn of length `n` from the Cholesky factor of its Toeplitz covariance.
fn fgn_cholesky(n: usize, hurst: f64, rng: &mut impl Rng) -> std::result::Result<Vec<f64>, String> {
    if n > CHOLESKY_MAX_POINTS {
        return Err(format!(
            "Cholesky fallback limited to {CHOLESKY_MAX_POINTS} points, requested {n}"
        ));
    }
    let acf: Vec<f64> = (0..n).map(|k| fgn_autocovariance(hurst, k)).collect();
    let cov = Matrix::from_fn(n, n, |i, j| acf[i.abs_diff(j)]);
    let chol = Cholesky::new(cov)
        .ok_or_else(|| "Toeplitz covariance is not positive definite".to_string())?;
    let z = crate::matcore::Vector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok((chol.l() * z).iter().copied().collect())
}

/// Unit-step fractional Gaussian noise of length `n` via the chosen synthesis route.
/// The circulant route falls back to Cholesky when the embedding is not PSD.
pub fn sample_fgn(
    n: usize,
    hurst: f64,
    rng: &mut impl Rng,
    method: FgnMethod,
) -> Result<Vec<f64>> {
    match method {
        FgnMethod::Cholesky => fgn_cholesky(n, hurst, rng).map_err(Error::Synthesis),
        FgnMethod::Circulant => match fgn_circulant(n, hurst, rng) {
            Ok(v) => Ok(v),
            Err(circ) => fgn_cholesky(n, hurst, rng).map_err(|chol| {
                Error::Synthesis(format!(
                    "circulant embedding failed ({circ}); Cholesky fallback failed ({chol})"
                ))
            }),
        },
    }
}

fn sample_component(spec: &NoiseSpec, n: usize, h: f64, rng: &mut ChaCha12Rng) -> Result<Vec<f64>> {
    match spec.kind {
        NoiseKind::Brownian => {
            let s = h.sqrt();
            Ok((0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect())
        }
        NoiseKind::Fbm => {
            let hurst = spec.hurst_exponent();
            let scale = h.powf(hurst);
            let mut v = sample_fgn(n, hurst, rng, FgnMethod::Circulant)?;
            v.iter_mut().for_each(|x| *x *= scale);
            Ok(v)
        }
        NoiseKind::CompoundPoisson => {
            let rate = spec.jump_rate.unwrap_or(1.0) * h;
            let std = spec.jump_std.unwrap_or(1.0);
            let arrivals = Poisson::new(rate)
                .map_err(|e| Error::Synthesis(format!("invalid Poisson rate {rate}: {e}")))?;
            Ok((0..n)
                .map(|_| {
                    let k = arrivals.sample(rng) as u64;
                    (0..k).map(|_| std * rng.sample::<f64, _>(StandardNormal)).sum()
                })
                .collect())
        }
    }
}

/// Noise increments for replication `replication` of a run seeded by `master_seed`.
pub fn sample_increments_stream(
    spec: &NoiseSpec,
    n: usize,
    h: f64,
    master_seed: u64,
    replication: u64,
) -> Result<IncrementArray> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Domain("number of increments must be >= 1".into()));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Domain(format!("grid step must be > 0, got {h}")));
    }
    let mut values = Matrix::zeros(spec.d, n);
    for i in 0..spec.d {
        let mut rng = substream_rng(master_seed, replication, i as u64);
        let row = sample_component(spec, n, h, &mut rng)?;
        for (k, x) in row.into_iter().enumerate() {
            values[(i, k)] = x;
        }
    }
    IncrementArray::new(h, values)
}

/// `N` increments at step `h`, deterministic in `seed`.
pub fn sample_increments(spec: &NoiseSpec, n: usize, h: f64, seed: u64) -> Result<IncrementArray> {
    sample_increments_stream(spec, n, h, seed, 0)
}

/// `V(1/N)^{-1} · (1/N) Σ ΔX ΔXᵀ` for the noise alone on `[0, 1]`.
pub fn quadratic_variation_ratio(spec: &NoiseSpec, n: usize, seed: u64) -> Result<Matrix> {
    if n < 2 {
        return Err(Error::Domain("quadratic variation needs N >= 2".into()));
    }
    let h = 1.0 / n as f64;
    let v = spec.variance(h)?;
    if !(v > 0.0) {
        return Err(Error::Singular(format!("V(1/N) = {v} is not invertible")));
    }
    let inc = sample_increments(spec, n, h, seed)?;
    let x = &inc.values;
    let gram = x * x.transpose();
    Ok(crate::matcore::symmetrize(&(gram / (n as f64 * v))))
}

/// Outcome of [`fbm_covariance_check`].
#[derive(Debug, Clone, Serialize)]
pub struct FbmCovarianceCheck {
    pub hurst: f64,
    pub n: usize,
    pub replications: usize,
    pub stride: usize,
    pub checked_pairs: usize,
    /// Largest `|sample − exact| / standard error` over the checked pairs.
    pub max_abs_z: f64,
    pub worst_pair: (f64, f64),
    pub exceedances: usize,
    pub z_threshold: f64,
}

impl FbmCovarianceCheck {
    pub fn passed(&self) -> bool {
        self.exceedances == 0
    }
}

/// Compares the sample covariance of synthesized fBm on `[0, 1]` (grid `1/n`)
/// with `(s^{2H} + t^{2H} − |t−s|^{2H})/2` on every `stride`-th grid point.
pub fn fbm_covariance_check(
    hurst: f64,
    n: usize,
    replications: usize,
    stride: usize,
    seed: u64,
    z_threshold: f64,
) -> Result<FbmCovarianceCheck> {
    let spec = NoiseSpec::fbm(1, hurst);
    spec.validate()?;
    if replications < 2 || stride == 0 || stride > n {
        return Err(Error::Config(
            "fBm covariance check needs >= 2 replications and 1 <= stride <= n".into(),
        ));
    }
    let h = 1.0 / n as f64;
    let idx: Vec<usize> = (1..=n / stride).map(|k| k * stride).collect();
    let m = idx.len();
    let mut sum = vec![0.0; m * m];
    let mut sum_sq = vec![0.0; m * m];
    let mut point = vec![0.0; m];
    for rep in 0..replications {
        let inc = sample_increments_stream(&spec, n, h, seed, rep as u64)?;
        let mut acc = 0.0;
        let mut next = 0;
        for k in 0..n {
            acc += inc.values[(0, k)];
            if next < m && k + 1 == idx[next] {
                point[next] = acc;
                next += 1;
            }
        }
        for a in 0..m {
            for b in a..m {
                let p = point[a] * point[b];
                sum[a * m + b] += p;
                sum_sq[a * m + b] += p * p;
            }
        }
    }
    let r = replications as f64;
    let two_h = 2.0 * hurst;
    let mut max_abs_z = 0.0;
    let mut worst_pair = (0.0, 0.0);
    let mut exceedances = 0;
    let mut checked = 0;
    for a in 0..m {
        for b in a..m {
            let s = idx[a] as f64 * h;
            let t = idx[b] as f64 * h;
            let exact = 0.5 * (s.powf(two_h) + t.powf(two_h) - (t - s).abs().powf(two_h));
            let mean = sum[a * m + b] / r;
            let var = (sum_sq[a * m + b] / r - mean * mean) * r / (r - 1.0);
            let se = (var.max(0.0) / r).sqrt();
            let z = (mean - exact).abs() / se.max(f64::MIN_POSITIVE);
            checked += 1;
            if z > z_threshold {
                exceedances += 1;
            }
            if z > max_abs_z {
                max_abs_z = z;
                worst_pair = (s, t);
            }
        }
    }
    Ok(FbmCovarianceCheck {
        hurst,
        n,
        replications,
        stride,
        checked_pairs: checked,
        max_abs_z,
        worst_pair,
        exceedances,
        z_threshold,
    })
}
