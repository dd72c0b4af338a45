//! Dense real-matrix utilities: matrix exponential, symmetric eigendecomposition,
//! positive-definite square roots and definiteness checks.
//!
//! Matrices are `nalgebra::DMatrix<f64>`; every routine here is a pure function.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative tolerance used for matcore postconditions.
pub const DEFAULT_RTOL: f64 = 1e-10;
/// Eigenvalue floor applied by [`sym_sqrt_pd`] unless the caller overrides it.
pub const DEFAULT_CLIP_EPS: f64 = 1e-12;
/// Relative threshold (times `‖M‖`) below which a negative eigenvalue is an error.
pub const DEFAULT_NEG_TOL: f64 = 1e-8;

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vector,
    /// Columns are unit eigenvectors, in the order of `eigenvalues`.
    pub eigenvectors: Matrix,
}

impl SymEig {
    /// `Q diag(f(λ)) Qᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let q = &self.eigenvectors;
        let mut scaled = q.clone();
        for (j, &lambda) in self.eigenvalues.iter().enumerate() {
            let v = f(lambda);
            scaled.column_mut(j).scale_mut(v);
        }
        symmetrize(&(scaled * q.transpose()))
    }

    pub fn reconstruct(&self) -> Matrix {
        self.map_spectrum(|l| l)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `(M + Mᵀ)/2`. The result is exactly symmetric.
pub fn symmetrize(m: &Matrix) -> Matrix {
    let n = m.nrows();
    Matrix::from_fn(n, m.ncols(), |i, j| {
        if i == j {
            m[(i, i)]
        } else {
            0.5 * (m[(i, j)] + m[(j, i)])
        }
    })
}

pub fn is_finite(m: &Matrix) -> bool {
    m.iter().all(|x| x.is_finite())
}

pub fn is_symmetric(m: &Matrix, rtol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.norm().max(f64::MIN_POSITIVE);
    (m - m.transpose()).norm() <= rtol * scale
}

fn check_square(m: &Matrix, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if !is_finite(m) {
        return Err(Error::Domain(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Symmetric eigendecomposition of `(M + Mᵀ)/2`.
pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    check_square(m, "matrix")?;
    check_finite(m, "matrix")?;
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = Vector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut eigenvectors = Matrix::zeros(n, n);
    for (j, &k) in order.iter().enumerate() {
        eigenvectors.set_column(j, &eig.eigenvectors.column(k));
    }
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

// Padé(13) coefficients for scaling and squaring.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

fn norm_1(m: &Matrix) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn expm_pade13(a: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    let norm = norm_1(a);
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let a = a / 2f64.powi(squarings);
    let b = &PADE13;
    let ident = Matrix::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;

    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];

    let p = &v + &u;
    let q = &v - &u;
    let mut r = q
        .lu()
        .solve(&p)
        .ok_or_else(|| Error::Singular("Padé denominator in matrix exponential".into()))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

/// Matrix exponential `e^A`.
///
/// Exactly symmetric inputs go through the eigendecomposition so the result is
/// symmetric positive definite; everything else uses scaling and squaring with a
/// degree-13 Padé approximant.
pub fn mat_exp(a: &Matrix) -> Result<Matrix> {
    check_square(a, "matrix exponential argument")?;
    check_finite(a, "matrix exponential argument")?;
    let out = if a == &a.transpose() {
        sym_eig(a)?.map_spectrum(f64::exp)
    } else {
        expm_pade13(a)?
    };
    check_finite(&out, "matrix exponential result")?;
    Ok(out)
}

/// Output of [`sym_sqrt_pd`].
#[derive(Debug, Clone)]
pub struct PdSqrt {
    pub root: Matrix,
    /// True when at least one eigenvalue was raised to the clipping floor.
    pub clipped: bool,
    /// Smallest eigenvalue of the symmetrized input, before clipping.
    pub min_eigenvalue: f64,
}

/// Symmetric square root of a (numerically) positive semidefinite matrix.
///
/// The input is symmetrized, eigenvalues below `clip_eps` are raised to
/// `clip_eps`, and eigenvalues below `-1e-8·‖M‖` are rejected.
pub fn sym_sqrt_pd(m: &Matrix, clip_eps: f64) -> Result<PdSqrt> {
    if clip_eps < 0.0 || !clip_eps.is_finite() {
        return Err(Error::Domain(format!("clip_eps must be >= 0, got {clip_eps}")));
    }
    let eig = sym_eig(m)?;
    let min_eigenvalue = eig.min_eigenvalue();
    let tol_neg = DEFAULT_NEG_TOL * m.norm();
    if min_eigenvalue < -tol_neg {
        return Err(Error::NotPsd {
            min_eigenvalue,
            tolerance: tol_neg,
        });
    }
    let clipped = eig.eigenvalues.iter().any(|&l| l < clip_eps);
    let root = eig.map_spectrum(|l| l.max(clip_eps).sqrt());
    Ok(PdSqrt {
        root,
        clipped,
        min_eigenvalue,
    })
}

/// True iff `(M + Mᵀ)/2` has smallest eigenvalue strictly greater than `tol`.
pub fn is_spd(m: &Matrix, tol: f64) -> bool {
    match sym_eig(m) {
        Ok(eig) => eig.min_eigenvalue() > tol,
        Err(_) => false,
    }
}

/// Smallest eigenvalue of the symmetric part, `None` for non-square or non-finite input.
pub fn min_sym_eigenvalue(m: &Matrix) -> Option<f64> {
    sym_eig(m).ok().map(|e| e.min_eigenvalue())
}

/// Serde helpers writing matrices as nested row arrays and vectors as flat arrays.
pub mod rows {
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    use super::{Matrix, Vector};

    pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> std::result::Result<Matrix, String> {
        let nrows = rows.len();
        if nrows == 0 {
            return Err("matrix must have at least one row".into());
        }
        let ncols = rows[0].len();
        if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
            return Err("matrix rows must be non-empty and of equal length".into());
        }
        Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }

    pub mod vector {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
            v.as_slice().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
            let v = Vec::<f64>::deserialize(d)?;
            if v.is_empty() {
                return Err(D::Error::custom("vector must be non-empty"));
            }
            Ok(Vector::from_vec(v))
        }
    }

    pub mod list {
        use super::*;

        pub fn serialize<S: Serializer>(ms: &[Matrix], s: S) -> Result<S::Ok, S::Error> {
            ms.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Matrix>, D::Error> {
            let raw = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
            raw.iter()
                .map(|r| from_rows(r).map_err(D::Error::custom))
                .collect()
        }
    }
}
