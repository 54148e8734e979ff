//! Gaussian posterior over the stacked system parameters, truncated to a
//! compact support set.
//!
//! Each column of the `d x n` parameter matrix has its own mean and all
//! columns share one `d x d` covariance. Observing `(z, x_next)` updates the
//! means by the usual recursive least-squares correction and the precision by
//! the rank-one term `z z' / sigma_w2`. Both `Sigma` and `Sigma^-1` are
//! maintained: the covariance through the rank-one downdate implied by the
//! recursion (keeping the hot path O(d^2)), the precision exactly, with a
//! full re-inversion every [`RESYNC_INTERVAL`] updates to bound drift.
//!
//! Sampling is rejection sampling against the support set; the caller decides
//! whether exhaustion is an error ([`PosteriorState::sample`]) or should fall
//! back to projecting the unconstrained draw ([`PosteriorState::sample_or_project`]).

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lqr::{LqrError, SystemParams};

/// Updates between explicit re-inversions of the tracked covariance.
pub const RESYNC_INTERVAL: usize = 1000;

/// Default rejection-sampling budget.
pub const MAX_SAMPLE_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error)]
pub enum PosteriorError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("rejection sampling exhausted after {attempts} attempts")]
    RejectionExhausted { attempts: usize },
    #[error("noise variance is zero but the regressor is non-zero")]
    DegenerateNoise,
    #[error(transparent)]
    Lqr(#[from] LqrError),
}

/// Stacked regressor `z = [x', u']'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor(DVector<f64>);

impl Regressor {
    pub fn new(z: DVector<f64>) -> Self {
        Self(z)
    }

    pub fn from_state_control(x: &DVector<f64>, u: &DVector<f64>) -> Self {
        let mut z = DVector::zeros(x.len() + u.len());
        z.rows_mut(0, x.len()).copy_from(x);
        z.rows_mut(x.len(), u.len()).copy_from(u);
        Self(z)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

/// Compact support set for the stacked parameter matrix: an axis-aligned box
/// (per-entry halfwidths) or a Frobenius-norm ball around a center.
#[derive(Debug, Clone, PartialEq)]
pub enum SupportKind {
    Box,
    Ball,
}

#[derive(Debug, Clone)]
pub struct SupportSet {
    kind: SupportKind,
    center: DMatrix<f64>,
    /// Per-entry halfwidths for a box (uniform boxes fill the matrix with one
    /// value); ignored for balls.
    halfwidths: DMatrix<f64>,
    /// Radius for a ball; for boxes, the largest halfwidth.
    radius: f64,
    /// Largest closed-loop spectral radius certified over this set, if any.
    pub certified_delta: Option<f64>,
}

impl SupportSet {
    /// Axis-aligned box with one halfwidth for every entry.
    pub fn box_uniform(center: DMatrix<f64>, halfwidth: f64) -> Result<Self, PosteriorError> {
        if halfwidth < 0.0 || halfwidth.is_nan() {
            return Err(PosteriorError::NonFinite("halfwidth"));
        }
        let halfwidths = DMatrix::from_element(center.nrows(), center.ncols(), halfwidth);
        Self::box_per_entry(center, halfwidths)
    }

    /// Axis-aligned box with an individual halfwidth per entry.
    pub fn box_per_entry(
        center: DMatrix<f64>,
        halfwidths: DMatrix<f64>,
    ) -> Result<Self, PosteriorError> {
        if halfwidths.shape() != center.shape() {
            return Err(PosteriorError::Dimension(format!(
                "halfwidths {}x{} must match center {}x{}",
                halfwidths.nrows(),
                halfwidths.ncols(),
                center.nrows(),
                center.ncols()
            )));
        }
        if halfwidths.iter().any(|h| *h < 0.0 || h.is_nan()) {
            return Err(PosteriorError::NonFinite("halfwidths"));
        }
        if !center.iter().all(|v| v.is_finite()) {
            return Err(PosteriorError::NonFinite("center"));
        }
        let radius = halfwidths.iter().cloned().fold(0.0, f64::max);
        Ok(Self {
            kind: SupportKind::Box,
            center,
            halfwidths,
            radius,
            certified_delta: None,
        })
    }

    /// Frobenius-norm ball.
    pub fn ball(center: DMatrix<f64>, radius: f64) -> Result<Self, PosteriorError> {
        if radius < 0.0 || radius.is_nan() {
            return Err(PosteriorError::NonFinite("radius"));
        }
        if !center.iter().all(|v| v.is_finite()) {
            return Err(PosteriorError::NonFinite("center"));
        }
        let halfwidths = DMatrix::zeros(center.nrows(), center.ncols());
        Ok(Self {
            kind: SupportKind::Ball,
            center,
            halfwidths,
            radius,
            certified_delta: None,
        })
    }

    /// A single point, as a box of halfwidth zero.
    pub fn singleton(center: DMatrix<f64>) -> Self {
        Self::box_uniform(center, 0.0).expect("zero halfwidth is valid")
    }

    pub fn kind(&self) -> &SupportKind {
        &self.kind
    }

    pub fn center(&self) -> &DMatrix<f64> {
        &self.center
    }

    pub fn halfwidths(&self) -> &DMatrix<f64> {
        &self.halfwidths
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Stacked dimensions `(d, n)` of the member matrices.
    pub fn dims(&self) -> (usize, usize) {
        (self.center.nrows(), self.center.ncols())
    }

    /// True when the set is a single point, so the truncated measure is the
    /// point mass at the center.
    pub fn is_degenerate(&self) -> bool {
        self.radius == 0.0
    }

    /// Deterministic, side-effect-free membership test.
    pub fn contains(&self, theta: &DMatrix<f64>) -> bool {
        if theta.shape() != self.center.shape() {
            return false;
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return false;
        }
        match self.kind {
            SupportKind::Box => theta
                .iter()
                .zip(self.center.iter())
                .zip(self.halfwidths.iter())
                .all(|((t, c), h)| (t - c).abs() <= *h),
            SupportKind::Ball => (theta - &self.center).norm() <= self.radius,
        }
    }

    /// Nearest member: per-entry clamp for boxes, radial pull-in for balls.
    pub fn project(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(theta.shape(), self.center.shape(), "projection shape mismatch");
        match self.kind {
            SupportKind::Box => DMatrix::from_fn(theta.nrows(), theta.ncols(), |i, j| {
                let c = self.center[(i, j)];
                let h = self.halfwidths[(i, j)];
                theta[(i, j)].clamp(c - h, c + h)
            }),
            SupportKind::Ball => {
                let delta = theta - &self.center;
                let norm = delta.norm();
                if norm <= self.radius {
                    theta.clone()
                } else {
                    &self.center + delta * (self.radius / norm)
                }
            }
        }
    }
}

/// Posterior over the stacked parameters at a given time.
#[derive(Debug, Clone)]
pub struct PosteriorState {
    means: DMatrix<f64>,     // d x n, column i = mean of theta(i)
    sigma: DMatrix<f64>,     // shared d x d covariance
    sigma_inv: DMatrix<f64>, // shared d x d precision
    log_det_precision: f64,  // log det Sigma^-1
    sigma_w2: f64,
    t: u64,
    updates_since_sync: usize,
}

fn log_det_from_cholesky(chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

impl PosteriorState {
    /// Posterior at time t = 1 from per-column means and a shared covariance.
    pub fn new(
        means: DMatrix<f64>,
        sigma: DMatrix<f64>,
        sigma_w2: f64,
    ) -> Result<Self, PosteriorError> {
        let d = means.nrows();
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(PosteriorError::Dimension(format!(
                "covariance must be {d}x{d}, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if !means.iter().all(|v| v.is_finite()) || !sigma.iter().all(|v| v.is_finite()) {
            return Err(PosteriorError::NonFinite("posterior parameters"));
        }
        if sigma_w2.is_nan() || sigma_w2 < 0.0 {
            return Err(PosteriorError::NonFinite("sigma_w2"));
        }
        if (&sigma - sigma.transpose()).amax() > 1e-10 * sigma.amax().max(1.0) {
            return Err(PosteriorError::NotPositiveDefinite);
        }
        let chol = Cholesky::new(sigma.clone()).ok_or(PosteriorError::NotPositiveDefinite)?;
        let log_det_precision = -log_det_from_cholesky(&chol);
        let sigma_inv = chol.inverse();
        Ok(Self {
            means,
            sigma,
            sigma_inv,
            log_det_precision,
            sigma_w2,
            t: 1,
            updates_since_sync: 0,
        })
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn sigma_inv(&self) -> &DMatrix<f64> {
        &self.sigma_inv
    }

    /// `log det Sigma^-1`, tracked through rank-one increments.
    pub fn log_det_precision(&self) -> f64 {
        self.log_det_precision
    }

    pub fn sigma_w2(&self) -> f64 {
        self.sigma_w2
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// Stacked dimensions `(d, n)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.means.nrows(), self.means.ncols())
    }

    /// Fold one observation `(z, x_next)` into the posterior.
    pub fn update(&mut self, z: &Regressor, x_next: &DVector<f64>) -> Result<(), PosteriorError> {
        let (d, n) = self.dims();
        if z.len() != d {
            return Err(PosteriorError::Dimension(format!(
                "regressor length {} must be d = {d}",
                z.len()
            )));
        }
        if x_next.len() != n {
            return Err(PosteriorError::Dimension(format!(
                "observation length {} must be n = {n}",
                x_next.len()
            )));
        }
        if !z.as_vector().iter().all(|v| v.is_finite())
            || !x_next.iter().all(|v| v.is_finite())
        {
            return Err(PosteriorError::NonFinite("observation"));
        }
        if z.is_zero() {
            // Rank-one term vanishes; only the clock moves.
            self.t += 1;
            return Ok(());
        }
        if self.sigma_w2 == 0.0 {
            return Err(PosteriorError::DegenerateNoise);
        }

        let zv = z.as_vector();
        let sz = &self.sigma * zv; // d
        let quad = zv.dot(&sz); // z' Sigma z >= 0
        let denom = self.sigma_w2 + quad;

        let predicted = self.means.transpose() * zv; // n
        let residual = x_next - predicted;
        self.means += &sz * residual.transpose() / denom;

        self.sigma -= &sz * sz.transpose() / denom;
        self.sigma = (&self.sigma + self.sigma.transpose()) * 0.5;

        self.sigma_inv += zv * zv.transpose() / self.sigma_w2;
        self.sigma_inv = (&self.sigma_inv + self.sigma_inv.transpose()) * 0.5;

        self.log_det_precision += (1.0 + quad / self.sigma_w2).ln();

        self.t += 1;
        self.updates_since_sync += 1;
        if self.updates_since_sync >= RESYNC_INTERVAL {
            self.resync()?;
        }
        Ok(())
    }

    /// Recompute the covariance and log-determinant directly from the
    /// precision matrix, discarding accumulated rank-one drift.
    pub fn resync(&mut self) -> Result<(), PosteriorError> {
        let chol = Cholesky::new(self.sigma_inv.clone())
            .ok_or(PosteriorError::NotPositiveDefinite)?;
        self.log_det_precision = log_det_from_cholesky(&chol);
        self.sigma = chol.inverse();
        self.updates_since_sync = 0;
        Ok(())
    }

    /// Multiplicative change of `det Sigma^-1` if `z` were observed next:
    /// `1 + z' Sigma z / sigma_w2`, always at least one, computed without
    /// forming determinants.
    pub fn det_ratio_increment(&self, z: &Regressor) -> f64 {
        if z.is_zero() {
            return 1.0;
        }
        let zv = z.as_vector();
        1.0 + zv.dot(&(&self.sigma * zv)) / self.sigma_w2
    }

    /// Draw a parameter matrix column-wise from `N(mean_i, Sigma)` and accept
    /// it only if it lies in the support set. Errors with
    /// [`PosteriorError::RejectionExhausted`] after `max_attempts` rejections.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        support: &SupportSet,
        rng: &mut R,
        max_attempts: usize,
    ) -> Result<SystemParams, PosteriorError> {
        if support.dims() != self.dims() {
            return Err(PosteriorError::Dimension(format!(
                "support dims {:?} must match posterior dims {:?}",
                support.dims(),
                self.dims()
            )));
        }
        if support.is_degenerate() {
            // Truncating any distribution to a single point gives the point
            // mass; rejection cannot produce it but it is exact.
            let n = self.means.ncols();
            return Ok(SystemParams::from_stacked(support.center(), n)?);
        }
        let chol = self.covariance_factor()?;
        for _ in 0..max_attempts {
            let theta = self.draw_unconstrained(&chol, rng);
            if support.contains(&theta) {
                let n = self.means.ncols();
                return Ok(SystemParams::from_stacked(&theta, n)?);
            }
        }
        Err(PosteriorError::RejectionExhausted {
            attempts: max_attempts,
        })
    }

    /// Like [`sample`](Self::sample), but on exhaustion projects one
    /// unconstrained draw onto the support instead of failing. The flag
    /// reports whether the fallback fired.
    pub fn sample_or_project<R: Rng + ?Sized>(
        &self,
        support: &SupportSet,
        rng: &mut R,
        max_attempts: usize,
    ) -> Result<(SystemParams, bool), PosteriorError> {
        match self.sample(support, rng, max_attempts) {
            Ok(theta) => Ok((theta, false)),
            Err(PosteriorError::RejectionExhausted { .. }) => {
                let chol = self.covariance_factor()?;
                let theta = support.project(&self.draw_unconstrained(&chol, rng));
                let n = self.means.ncols();
                Ok((SystemParams::from_stacked(&theta, n)?, true))
            }
            Err(e) => Err(e),
        }
    }

    fn covariance_factor(&self) -> Result<Cholesky<f64, nalgebra::Dyn>, PosteriorError> {
        if let Some(chol) = Cholesky::new(self.sigma.clone()) {
            return Ok(chol);
        }
        // The tracked covariance may have drifted off the PD cone; rebuild it
        // from the exactly-maintained precision.
        let prec = Cholesky::new(self.sigma_inv.clone())
            .ok_or(PosteriorError::NotPositiveDefinite)?;
        Cholesky::new(prec.inverse()).ok_or(PosteriorError::NotPositiveDefinite)
    }

    fn draw_unconstrained<R: Rng + ?Sized>(
        &self,
        chol: &Cholesky<f64, nalgebra::Dyn>,
        rng: &mut R,
    ) -> DMatrix<f64> {
        let (d, n) = self.dims();
        let eta = DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.means + chol.l() * eta
    }

    /// Plain-data snapshot for run-record output.
    pub fn snapshot(&self) -> PosteriorSnapshot {
        PosteriorSnapshot {
            means: matrix_rows(&self.means),
            sigma: matrix_rows(&self.sigma),
            log_det_precision: self.log_det_precision,
            sigma_w2: self.sigma_w2,
            t: self.t,
        }
    }
}

/// Closed-form conjugate refit over a full history, starting from a prior.
///
/// This is the one-shot route: `Sigma_T^-1 = Sigma_1^-1 + sum z z' / sigma_w2`
/// and means solved from the accumulated normal equations. Folding
/// [`PosteriorState::update`] over the same history must agree with it.
pub fn batch_refit(
    history: &[(Regressor, DVector<f64>)],
    prior: &PosteriorState,
) -> Result<PosteriorState, PosteriorError> {
    let (d, n) = prior.dims();
    let mut precision = prior.sigma_inv.clone();
    let mut normal_rhs = &prior.sigma_inv * &prior.means; // d x n
    for (z, y) in history {
        if z.len() != d || y.len() != n {
            return Err(PosteriorError::Dimension(
                "history entry does not match prior dims".into(),
            ));
        }
        if z.is_zero() {
            continue;
        }
        if prior.sigma_w2 == 0.0 {
            return Err(PosteriorError::DegenerateNoise);
        }
        let zv = z.as_vector();
        precision += zv * zv.transpose() / prior.sigma_w2;
        normal_rhs += zv * y.transpose() / prior.sigma_w2;
    }
    let chol = Cholesky::new(precision.clone()).ok_or(PosteriorError::NotPositiveDefinite)?;
    let log_det_precision = log_det_from_cholesky(&chol);
    let means = chol.solve(&normal_rhs);
    let sigma = chol.inverse();
    Ok(PosteriorState {
        means,
        sigma,
        sigma_inv: precision,
        log_det_precision,
        sigma_w2: prior.sigma_w2,
        t: prior.t + history.len() as u64,
        updates_since_sync: 0,
    })
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Plain-data snapshot of a posterior, for run-record output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSnapshot {
    pub means: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub log_det_precision: f64,
    pub sigma_w2: f64,
    pub t: u64,
}
