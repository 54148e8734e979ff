//! Infinite-horizon discrete-time LQR for a known parameter: Riccati fixed
//! point, optimal feedback gain, and optimal average cost.
//!
//! The solver is a plain value iteration `S <- Q + A'SA - A'SB(R + B'SB)^-1 B'SA`
//! seeded at `S = Q`. Every iterate is re-symmetrized to suppress drift, and
//! the returned matrix satisfies `||S - riccati_map(S)||_F <= tol` by
//! construction. Stabilizability is not tested up front; non-convergence is
//! the detection mechanism.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

/// Default Frobenius tolerance on successive Riccati iterates.
pub const DEFAULT_TOL: f64 = 1e-12;
/// Default iteration cap for the Riccati fixed point.
pub const DEFAULT_MAX_ITER: usize = 10_000;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LqrError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{name} must be symmetric positive definite (min eigenvalue {min_eig:.3e})")]
    NotPositiveDefinite { name: &'static str, min_eig: f64 },
    #[error("{name} is not symmetric to tolerance {tol:.1e}")]
    NotSymmetric { name: &'static str, tol: f64 },
    #[error(
        "Riccati iteration did not converge after {iterations} iterations \
         (last step {last_step:.3e}); the pair may not be stabilizable"
    )]
    NonConvergence { iterations: usize, last_step: f64 },
    #[error("matrix {0} is singular")]
    Singular(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

/// System dynamics matrices `(A, B)` with `x' = A x + B u + w`.
///
/// Also exposed in stacked form: a `d x n` matrix `theta` with
/// `theta' = [A, B]` and `d = n + m`, so that `theta' z = A x + B u` for
/// `z = [x', u']'`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl SystemParams {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self, LqrError> {
        if !a.is_square() {
            return Err(LqrError::Dimension(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != a.nrows() {
            return Err(LqrError::Dimension(format!(
                "B must have {} rows, got {}",
                a.nrows(),
                b.nrows()
            )));
        }
        if b.ncols() == 0 {
            return Err(LqrError::Dimension("B must have at least one column".into()));
        }
        if !a.iter().chain(b.iter()).all(|v| v.is_finite()) {
            return Err(LqrError::NonFinite("system parameters"));
        }
        Ok(Self { a, b })
    }

    /// Rebuild `(A, B)` from the stacked `d x n` form.
    pub fn from_stacked(theta: &DMatrix<f64>, n: usize) -> Result<Self, LqrError> {
        let d = theta.nrows();
        if theta.ncols() != n || d <= n {
            return Err(LqrError::Dimension(format!(
                "stacked parameter must be d x n with d > n, got {}x{} for n = {}",
                d,
                theta.ncols(),
                n
            )));
        }
        let m = d - n;
        let tt = theta.transpose(); // n x d = [A, B]
        let a = tt.view((0, 0), (n, n)).into_owned();
        let b = tt.view((0, n), (n, m)).into_owned();
        Self::new(a, b)
    }

    /// Stacked `d x n` parameter matrix with `theta' = [A, B]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        let mut theta = DMatrix::zeros(n + m, n);
        theta.view_mut((0, 0), (n, n)).copy_from(&self.a.transpose());
        theta.view_mut((n, 0), (m, n)).copy_from(&self.b.transpose());
        theta
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// State dimension n.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Control dimension m.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Stacked dimension d = n + m.
    pub fn d(&self) -> usize {
        self.n() + self.m()
    }

    /// Noise-free one-step prediction `A x + B u`.
    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

/// Positive definite stage-cost matrices of `c(x, u) = x'Qx + u'Ru`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrices {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl CostMatrices {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self, LqrError> {
        check_spd(&q, "Q")?;
        check_spd(&r, "R")?;
        Ok(Self { q, r })
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            q: DMatrix::identity(n, n),
            r: DMatrix::identity(m, m),
        }
    }
}

fn check_spd(m: &DMatrix<f64>, name: &'static str) -> Result<(), LqrError> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(LqrError::Dimension(format!(
            "{name} must be square and non-empty, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(LqrError::NonFinite(name));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > SYMMETRY_TOL * scale {
        return Err(LqrError::NotSymmetric {
            name,
            tol: SYMMETRY_TOL,
        });
    }
    let min_eig = m
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min_eig <= 0.0 {
        return Err(LqrError::NotPositiveDefinite { name, min_eig });
    }
    Ok(())
}

/// Solution of the discrete algebraic Riccati equation for one parameter.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// Symmetric PSD value matrix.
    pub s: DMatrix<f64>,
    /// Optimal feedback gain, `u = G x`.
    pub gain: DMatrix<f64>,
    /// Optimal average cost `sigma_w2 * trace(S)`.
    pub average_cost: f64,
    /// `||S - riccati_map(S)||_F` at the returned iterate.
    pub residual: f64,
    /// Iterations consumed by the fixed point.
    pub iterations: usize,
}

/// One application of the Riccati operator, re-symmetrized.
pub fn riccati_map(
    s: &DMatrix<f64>,
    theta: &SystemParams,
    cost: &CostMatrices,
) -> Result<DMatrix<f64>, LqrError> {
    let (a, b) = (theta.a(), theta.b());
    let sa = s * a; // n x n
    let sb = s * b; // n x m
    let inner = cost.r() + b.transpose() * &sb;
    let chol = Cholesky::new(inner).ok_or(LqrError::Singular("R + B'SB"))?;
    let btsa = b.transpose() * &sa; // m x n
    let correction = (a.transpose() * &sb) * chol.solve(&btsa);
    let next = cost.q() + a.transpose() * &sa - correction;
    Ok((&next + next.transpose()) * 0.5)
}

/// Solve the Riccati equation by value iteration seeded at `S = Q`.
///
/// Returns an error after `max_iter` iterations without two successive
/// iterates coming within `tol` in Frobenius norm, or as soon as an iterate
/// stops being finite (both signal an unstabilizable or ill-conditioned
/// pair).
pub fn solve_dare(
    theta: &SystemParams,
    cost: &CostMatrices,
    sigma_w2: f64,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution, LqrError> {
    if tol <= 0.0 {
        return Err(LqrError::InvalidArgument("tol must be positive"));
    }
    if cost.q().nrows() != theta.n() || cost.r().nrows() != theta.m() {
        return Err(LqrError::Dimension(format!(
            "cost matrices {}x{} do not match system dims n = {}, m = {}",
            cost.q().nrows(),
            cost.r().nrows(),
            theta.n(),
            theta.m()
        )));
    }

    let mut s = cost.q().clone();
    let mut last_step = f64::INFINITY;
    for it in 1..=max_iter {
        let next = riccati_map(&s, theta, cost)?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(LqrError::NonConvergence {
                iterations: it,
                last_step,
            });
        }
        last_step = (&next - &s).norm();
        if last_step <= tol {
            // Returning the pre-map iterate makes the residual equal to the
            // measured step, so the residual contract holds exactly.
            let g = gain(&s, theta, cost)?;
            let j = average_cost(&s, sigma_w2);
            return Ok(RiccatiSolution {
                s,
                gain: g,
                average_cost: j,
                residual: last_step,
                iterations: it,
            });
        }
        s = next;
    }
    Err(LqrError::NonConvergence {
        iterations: max_iter,
        last_step,
    })
}

/// Optimal feedback gain `G = -(R + B'SB)^-1 B'SA`.
pub fn gain(
    s: &DMatrix<f64>,
    theta: &SystemParams,
    cost: &CostMatrices,
) -> Result<DMatrix<f64>, LqrError> {
    if s.nrows() != theta.n() || !s.is_square() {
        return Err(LqrError::Dimension(format!(
            "S must be {n}x{n}, got {}x{}",
            s.nrows(),
            s.ncols(),
            n = theta.n()
        )));
    }
    let b = theta.b();
    let inner = cost.r() + b.transpose() * s * b;
    let chol = Cholesky::new(inner).ok_or(LqrError::Singular("R + B'SB"))?;
    Ok(-chol.solve(&(b.transpose() * s * theta.a())))
}

/// Optimal average cost `sigma_w2 * trace(S)`.
pub fn average_cost(s: &DMatrix<f64>, sigma_w2: f64) -> f64 {
    assert!(s.is_square(), "S must be square");
    sigma_w2 * s.trace()
}

/// Closed-loop dynamics `A + B G`.
pub fn closed_loop(theta: &SystemParams, g: &DMatrix<f64>) -> Result<DMatrix<f64>, LqrError> {
    if g.nrows() != theta.m() || g.ncols() != theta.n() {
        return Err(LqrError::Dimension(format!(
            "gain must be {}x{}, got {}x{}",
            theta.m(),
            theta.n(),
            g.nrows(),
            g.ncols()
        )));
    }
    Ok(theta.a() + theta.b() * g)
}
