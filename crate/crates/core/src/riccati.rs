//! Positive definite solutions of the continuous-time algebraic Riccati equation
//!
//! ```text
//! BᵀΘ + ΘB − ΘCΘ + D = 0
//! ```
//!
//! with `B` antisymmetric, `C` symmetric positive semidefinite and `D` symmetric.
//! The stabilizing solution is read off the stable invariant subspace of the
//! Hamiltonian `[[B, −C], [−D, −Bᵀ]]`, which is obtained from the matrix sign
//! function, and then polished by Newton–Kleinman steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{self, Matrix};

pub const DEFAULT_CARE_TOL: f64 = 1e-9;
const MAX_NEWTON: usize = 50;
const MAX_SIGN_ITER: usize = 100;

#[derive(Debug, Clone)]
pub struct CareProblem {
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
    pub tol: f64,
}

impl CareProblem {
    /// Builds the problem, projecting `B` onto its antisymmetric part and `C`, `D`
    /// onto their symmetric parts.
    pub fn new(b: &Matrix, c: &Matrix, d: &Matrix, tol: f64) -> Result<Self> {
        let n = b.nrows();
        for (name, m) in [("B", b), ("C", c), ("D", d)] {
            if m.shape() != (n, n) {
                return Err(Error::Dimension(format!(
                    "CARE coefficient {name} is {:?}, expected {n}x{n}",
                    m.shape()
                )));
            }
            if !matcore::is_finite(m) {
                return Err(Error::Domain(format!("CARE coefficient {name} is not finite")));
            }
        }
        if !(tol > 0.0) {
            return Err(Error::Domain(format!("CARE tolerance must be > 0, got {tol}")));
        }
        Ok(Self {
            b: (b - b.transpose()) * 0.5,
            c: matcore::symmetrize(c),
            d: matcore::symmetrize(d),
            tol,
        })
    }

    pub fn dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn residual(&self, theta: &Matrix) -> Matrix {
        care_residual(&self.b, &self.c, &self.d, theta)
    }

    /// `‖D‖ + ‖B‖‖Θ‖ + ‖C‖‖Θ‖²` (Frobenius norms), the scale of the residual contract.
    pub fn residual_scale(&self, theta: &Matrix) -> f64 {
        let t = theta.norm();
        self.d.norm() + self.b.norm() * t + self.c.norm() * t * t
    }
}

/// `BᵀΘ + ΘB − ΘCΘ + D`.
pub fn care_residual(b: &Matrix, c: &Matrix, d: &Matrix, theta: &Matrix) -> Matrix {
    b.transpose() * theta + theta * b - theta * c * theta + d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverBranch {
    /// Stable invariant subspace of the Hamiltonian, accepted as is.
    Subspace,
    /// Stable invariant subspace followed by Newton refinement.
    SubspaceNewton,
    /// `B ≈ 0` fallback `Θ = C^{-1/2}(C^{1/2} D C^{1/2})^{1/2} C^{-1/2}`.
    ClosedForm,
}

#[derive(Debug, Clone)]
pub struct CareSolution {
    pub theta: Matrix,
    pub branch: SolverBranch,
    pub newton_iterations: usize,
    /// Frobenius norm of the residual at `theta`.
    pub residual: f64,
    /// Residual contract bound `tol · scale` at `theta`.
    pub residual_bound: f64,
    pub min_eigenvalue: f64,
}

fn no_pd(p: &CareProblem, reason: String) -> Error {
    Error::NoPdSolution {
        reason,
        b: Box::new(p.b.clone()),
        c: Box::new(p.c.clone()),
        d: Box::new(p.d.clone()),
    }
}

/// Matrix sign function by scaled Newton iteration. Fails when the iterate becomes
/// singular, i.e. when eigenvalues sit on (or numerically near) the imaginary axis.
fn matrix_sign(h: &Matrix) -> Result<Matrix> {
    let n = h.nrows();
    let mut z = h.clone();
    for _ in 0..MAX_SIGN_ITER {
        let lu = z.clone().lu();
        let det = lu.determinant();
        let inv = lu.try_inverse().ok_or_else(|| {
            Error::CareStructure("Hamiltonian has eigenvalues on the imaginary axis".into())
        })?;
        let mu = if det != 0.0 && det.is_finite() {
            det.abs().powf(-1.0 / n as f64)
        } else {
            1.0
        };
        let next = (&z * mu + inv / mu) * 0.5;
        if !matcore::is_finite(&next) {
            return Err(Error::CareStructure(
                "sign iteration diverged; Hamiltonian spectrum touches the imaginary axis".into(),
            ));
        }
        let delta = (&next - &z).norm();
        z = next;
        if delta <= 1e-13 * z.norm() {
            return Ok(z);
        }
    }
    // One unscaled polish in case the scaled loop stalled near convergence.
    let inv = z.clone().try_inverse().ok_or_else(|| {
        Error::CareStructure("Hamiltonian has eigenvalues on the imaginary axis".into())
    })?;
    let next = (&z + inv) * 0.5;
    if (&next - &z).norm() <= 1e-8 * next.norm() {
        Ok(next)
    } else {
        Err(Error::CareStructure(
            "sign iteration did not converge; Hamiltonian spectrum is too close to the imaginary axis".into(),
        ))
    }
}

/// Solution from the stable invariant subspace of the Hamiltonian.
fn stable_subspace_solution(p: &CareProblem) -> Result<Matrix> {
    let n = p.dim();
    let mut ham = Matrix::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(&p.b);
    ham.view_mut((0, n), (n, n)).copy_from(&(-&p.c));
    ham.view_mut((n, 0), (n, n)).copy_from(&(-&p.d));
    ham.view_mut((n, n), (n, n)).copy_from(&(-p.b.transpose()));

    let sign = matrix_sign(&ham)?;
    // The trace of sign(H) counts unstable minus stable eigenvalues.
    let trace = sign.trace();
    if trace.abs() > 0.5 {
        return Err(Error::CareStructure(format!(
            "Hamiltonian has eigenvalues on the imaginary axis, so no stabilizing solution exists \
             (sign-function count of stable eigenvalues {:.1}, expected {n})",
            ((2 * n) as f64 - trace) / 2.0
        )));
    }
    // Stable subspace = ker(sign(H) + I) = span [I; Θ]:
    //   [W12; W22 + I] Θ = −[W11 + I; W21]
    let w = sign;
    let mut lhs = Matrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n))
        .copy_from(&(w.view((n, n), (n, n)) + Matrix::identity(n, n)));
    let mut rhs = Matrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(-(w.view((0, 0), (n, n)) + Matrix::identity(n, n))));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w.view((n, 0), (n, n))));

    let svd = lhs.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-12 * smax) {
        return Err(Error::CareSubspace(format!(
            "stable subspace basis is singular (condition {:e})",
            smax / smin
        )));
    }
    let theta = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::CareSubspace(e.to_string()))?;
    Ok(matcore::symmetrize(&theta))
}

/// Solves `AᵀX + XA = Q` through the Kronecker form.
fn solve_lyapunov(a: &Matrix, q: &Matrix) -> Option<Matrix> {
    let n = a.nrows();
    let at = a.transpose();
    let ident = Matrix::identity(n, n);
    let k = ident.kronecker(&at) + at.kronecker(&ident);
    let rhs = crate::matcore::Vector::from_column_slice(q.as_slice());
    let x = k.lu().solve(&rhs)?;
    Some(Matrix::from_column_slice(n, n, x.as_slice()))
}

/// Newton–Kleinman refinement with step halving on residual increase.
fn newton_refine(p: &CareProblem, mut theta: Matrix) -> (Matrix, usize) {
    let mut res = p.residual(&theta);
    let mut res_norm = res.norm();
    let mut iters = 0;
    // Iterate to stagnation; acceptance against `tol` happens in `finish`.
    while iters < MAX_NEWTON && res_norm > 4.0 * f64::EPSILON * p.residual_scale(&theta) {
        let closed = &p.b - &p.c * &theta;
        let Some(step) = solve_lyapunov(&closed, &(-&res)) else {
            break;
        };
        let step = matcore::symmetrize(&step);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = &theta + &step * alpha;
            let cand_res = p.residual(&cand);
            let n = cand_res.norm();
            if n.is_finite() && n < res_norm {
                accepted = Some((cand, cand_res, n));
                break;
            }
            alpha *= 0.5;
        }
        iters += 1;
        match accepted {
            Some((cand, cand_res, n)) => {
                theta = cand;
                res = cand_res;
                res_norm = n;
            }
            None => break,
        }
    }
    (theta, iters)
}

fn finish(p: &CareProblem, theta: Matrix, branch: SolverBranch, iters: usize) -> Result<CareSolution> {
    let theta = matcore::symmetrize(&theta);
    let residual = p.residual(&theta).norm();
    let residual_bound = p.tol * p.residual_scale(&theta);
    let min_eigenvalue = matcore::min_sym_eigenvalue(&theta).unwrap_or(f64::NAN);
    if !(min_eigenvalue > 0.0) {
        return Err(no_pd(
            p,
            format!("solution has smallest eigenvalue {min_eigenvalue:e}"),
        ));
    }
    if !(residual <= residual_bound) {
        return Err(no_pd(
            p,
            format!("residual {residual:e} exceeds tolerance bound {residual_bound:e}"),
        ));
    }
    Ok(CareSolution {
        theta,
        branch,
        newton_iterations: iters,
        residual,
        residual_bound,
        min_eigenvalue,
    })
}

/// Stabilizing symmetric positive definite solution of the CARE.
pub fn care_solve(p: &CareProblem) -> Result<CareSolution> {
    let c_norm = p.c.norm();
    let scale = p.b.norm() + p.d.norm();
    if !(c_norm > 1e-12 * scale) || c_norm == 0.0 {
        return Err(Error::CareDegenerate(format!(
            "‖C‖ = {c_norm:e} is numerically zero; Θ is not identifiable at this time instance"
        )));
    }
    let b_small = p.b.norm() <= p.tol * c_norm;
    match stable_subspace_solution(p) {
        Ok(theta0) => {
            let (theta, iters) = newton_refine(p, theta0);
            let branch = if iters == 0 {
                SolverBranch::Subspace
            } else {
                SolverBranch::SubspaceNewton
            };
            finish(p, theta, branch, iters)
        }
        Err(e) if b_small => match care_closed_form_b0(&p.c, &p.d) {
            Ok(theta) => finish(p, theta, SolverBranch::ClosedForm, 0),
            Err(closed) => Err(no_pd(
                p,
                format!("{e}; closed-form fallback failed: {closed}"),
            )),
        },
        Err(e) => Err(e),
    }
}

/// `Θ = C^{-1/2} (C^{1/2} D C^{1/2})^{1/2} C^{-1/2}`, the PSD solution of `ΘCΘ = D`.
pub fn care_closed_form_b0(c: &Matrix, d: &Matrix) -> Result<Matrix> {
    if c.shape() != d.shape() || !c.is_square() {
        return Err(Error::Dimension("C and D must be square and of equal size".into()));
    }
    let eig = matcore::sym_eig(c)?;
    let lmin = eig.min_eigenvalue();
    if !(lmin > 0.0) {
        return Err(Error::Domain(format!(
            "C must be positive definite, smallest eigenvalue {lmin:e}"
        )));
    }
    let c_half = eig.map_spectrum(f64::sqrt);
    let c_neg_half = eig.map_spectrum(|l| 1.0 / l.sqrt());
    let inner = matcore::symmetrize(&(&c_half * matcore::symmetrize(d) * &c_half));
    let root = matcore::sym_sqrt_pd(&inner, 0.0)?.root;
    Ok(matcore::symmetrize(&(&c_neg_half * root * &c_neg_half)))
}
