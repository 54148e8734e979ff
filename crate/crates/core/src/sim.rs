//! Ground-truth environment: linear dynamics with i.i.d. Gaussian noise and
//! a quadratic per-step cost, under seeded, replayable randomness.
//!
//! Noise is drawn from a ChaCha20 stream (ziggurat standard-normal transform
//! from `rand_distr`), so a run is reproducible bit-for-bit from its seed and
//! stream index. Parallel runs derive disjoint streams from one master seed
//! via [`stream_pair`].

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::lqr::{CostMatrices, SystemParams};

/// Generator identity recorded in experiment headers so runs can be replayed
/// across implementations.
pub const RNG_DESCRIPTOR: &str =
    "chacha20 (rand_chacha 0.9, per-run streams) + ziggurat normal (rand_distr 0.5)";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("state became non-finite at t = {t}")]
    NonFinite { t: i64 },
}

/// Independent generators for one run: `(environment, sampler)`, on streams
/// `2 * run_index` and `2 * run_index + 1` of the master seed.
pub fn stream_pair(master_seed: u64, run_index: u64) -> (ChaCha20Rng, ChaCha20Rng) {
    let mut env = ChaCha20Rng::seed_from_u64(master_seed);
    env.set_stream(2 * run_index);
    let mut sampler = ChaCha20Rng::seed_from_u64(master_seed);
    sampler.set_stream(2 * run_index + 1);
    (env, sampler)
}

/// Quadratic stage cost `x'Qx + u'Ru`; nonnegative for valid cost matrices.
pub fn cost(x: &DVector<f64>, u: &DVector<f64>, cm: &CostMatrices) -> f64 {
    assert_eq!(x.len(), cm.q().nrows(), "state dimension mismatch");
    assert_eq!(u.len(), cm.r().nrows(), "control dimension mismatch");
    (x.transpose() * cm.q() * x)[(0, 0)] + (u.transpose() * cm.r() * u)[(0, 0)]
}

/// Environment state: current state vector, clock, accrued cost, and the
/// run's own noise generator.
#[derive(Debug)]
pub struct EnvState {
    x: DVector<f64>,
    t: i64,
    cumulative_cost: f64,
    sigma_w: f64,
    rng: ChaCha20Rng,
    max_noise_norm: f64,
    noise_log: Option<Vec<DVector<f64>>>,
}

impl EnvState {
    /// Fresh environment at `x = 0`, `t = 1`.
    pub fn new(n: usize, sigma_w2: f64, rng: ChaCha20Rng, record_noise: bool) -> Self {
        assert!(sigma_w2 >= 0.0, "noise variance must be nonnegative");
        Self {
            x: DVector::zeros(n),
            t: 1,
            cumulative_cost: 0.0,
            sigma_w: sigma_w2.sqrt(),
            rng,
            max_noise_norm: 0.0,
            noise_log: record_noise.then(Vec::new),
        }
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn t(&self) -> i64 {
        self.t
    }

    pub fn cumulative_cost(&self) -> f64 {
        self.cumulative_cost
    }

    /// Largest Euclidean noise norm drawn so far.
    pub fn noise_max(&self) -> f64 {
        self.max_noise_norm
    }

    pub fn noise_log(&self) -> Option<&[DVector<f64>]> {
        self.noise_log.as_deref()
    }

    /// Accrue the cost of `(x_t, u_t)`, then advance
    /// `x_{t+1} = A x_t + B u_t + w_t` with `w_t ~ N(0, sigma_w2 I)`.
    /// Returns the stage cost.
    pub fn step(
        &mut self,
        theta: &SystemParams,
        u: &DVector<f64>,
        cm: &CostMatrices,
    ) -> Result<f64, SimError> {
        if theta.n() != self.x.len() {
            return Err(SimError::Dimension(format!(
                "system state dim {} does not match environment dim {}",
                theta.n(),
                self.x.len()
            )));
        }
        if u.len() != theta.m() {
            return Err(SimError::Dimension(format!(
                "control dim {} does not match system input dim {}",
                u.len(),
                theta.m()
            )));
        }
        let c = cost(&self.x, u, cm);
        self.cumulative_cost += c;

        let n = self.x.len();
        // Draw even when sigma_w = 0 so paired-variance runs consume the
        // generator identically.
        let w = DVector::from_fn(n, |_, _| {
            self.sigma_w * self.rng.sample::<f64, _>(StandardNormal)
        });
        self.max_noise_norm = self.max_noise_norm.max(w.norm());
        if let Some(log) = &mut self.noise_log {
            log.push(w.clone());
        }

        self.x = theta.predict(&self.x, u) + w;
        self.t += 1;
        if !self.x.iter().all(|v| v.is_finite()) {
            return Err(SimError::NonFinite { t: self.t });
        }
        Ok(c)
    }
}

/// Maximum Euclidean norm over a recorded noise sequence.
pub fn noise_max_from_log(log: &[DVector<f64>]) -> f64 {
    log.iter().map(|w| w.norm()).fold(0.0, f64::max)
}
