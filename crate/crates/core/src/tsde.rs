//! The adaptive control loop: episodes of dynamic length with an enforced
//! minimum, a fresh parameter sampled from the posterior at each episode
//! start, and linear feedback with the sampled parameter's optimal gain.
//!
//! An episode that started at `t_k` ends at the first `t` with
//! `t - t_k > t_min` and either
//!
//! - `t - t_k > T_{k-1}` (the episode outgrew its predecessor), or
//! - `det Sigma_t < det Sigma_{t_k} / 2` (the posterior sharpened enough),
//!
//! evaluated in log space from the exact rank-one determinant increments, so
//! no `d x d` determinant is ever formed in the loop. When both conditions
//! fire at once the length trigger is recorded; this makes macro-episode
//! statistics reproducible and conservative. A macro-episode is a maximal run
//! of consecutive episodes in which only the length trigger fires; a new one
//! starts after every determinant-triggered episode end.
//!
//! The loop starts at `t = 1` with the bookkeeping seeded as if a virtual
//! episode of length `t_min + 1` had just ended, so the first real episode
//! samples immediately and obeys the same length law as every later one.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lqr::{self, CostMatrices, LqrError, RiccatiSolution, SystemParams};
use crate::posterior::{PosteriorError, PosteriorState, Regressor, SupportSet, MAX_SAMPLE_ATTEMPTS};
use crate::sim::{EnvState, SimError};
use crate::stability::operator_norm;

/// Resample budget when a sampled parameter defeats the Riccati solver.
pub const DARE_RESAMPLE_LIMIT: usize = 10;

/// Abort threshold on the state norm.
pub const STATE_NORM_GUARD: f64 = 1e12;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Lqr(#[from] LqrError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(
        "gain solve failed for {attempts} consecutive posterior samples at episode {episode}"
    )]
    SampledGainFailed { episode: usize, attempts: usize },
    #[error("state norm {norm:.3e} exceeded the guard at t = {t}; the support is likely not certifiable")]
    StateExplosion { t: i64, norm: f64 },
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
}

/// Which stopping rule ended an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trigger {
    /// Episode became longer than its predecessor.
    Length,
    /// Posterior covariance determinant halved after the minimum length.
    Determinant,
    /// Horizon ran out (final episode only; not a real stop).
    Horizon,
}

/// Live state of the current episode.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    /// Episode index, starting at 1 (0 is the virtual seed episode).
    pub k: usize,
    /// Start time `t_k`.
    pub start_time: i64,
    /// Length of the previous episode `T_{k-1}`.
    pub prev_length: i64,
    /// `log det Sigma^-1` snapshot at the episode start.
    pub log_det_precision_at_start: f64,
    /// Sampled parameter driving this episode.
    pub theta_bar: SystemParams,
    /// Riccati solution at the sampled parameter (gain, value matrix,
    /// average cost).
    pub riccati: RiccatiSolution,
    /// Configured minimum episode length.
    pub t_min: i64,
}

impl EpisodeState {
    /// Virtual episode 0: start time `-t_min`, previous length `t_min`, so
    /// both stopping conditions fire at `t = 1`.
    fn virtual_seed(t_min: i64, log_det_precision: f64, n: usize, m: usize) -> Self {
        let zeros = SystemParams::new(DMatrix::zeros(n, n), DMatrix::zeros(n, m))
            .expect("zero system is well formed");
        Self {
            k: 0,
            start_time: -t_min,
            prev_length: t_min,
            log_det_precision_at_start: log_det_precision,
            riccati: RiccatiSolution {
                s: DMatrix::zeros(n, n),
                gain: DMatrix::zeros(m, n),
                average_cost: 0.0,
                residual: 0.0,
                iterations: 0,
            },
            theta_bar: zeros,
            t_min,
        }
    }

    /// Feedback control `u = G(theta_bar) x`.
    pub fn control(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.riccati.gain * x
    }
}

/// Stopping rule: end the episode at `t` iff the minimum length is exceeded
/// and either the length or the determinant condition holds. Length takes
/// precedence when both fire.
pub fn should_end_episode(
    ep: &EpisodeState,
    t: i64,
    log_det_precision_now: f64,
) -> Option<Trigger> {
    let len = t - ep.start_time;
    if len <= ep.t_min {
        return None;
    }
    if len > ep.prev_length {
        return Some(Trigger::Length);
    }
    if log_det_precision_now > ep.log_det_precision_at_start + std::f64::consts::LN_2 {
        return Some(Trigger::Determinant);
    }
    None
}

/// Start episode `k + 1` at time `t`: sample a parameter from the posterior
/// restricted to the support (projecting onto it if rejection exhausts),
/// solve its Riccati equation (resampling up to [`DARE_RESAMPLE_LIMIT`] times
/// if the solve fails), and snapshot the determinant. Returns the new episode
/// and the number of projection fallbacks consumed.
pub fn begin_episode(
    posterior: &PosteriorState,
    support: &SupportSet,
    cost: &CostMatrices,
    t: i64,
    prev: &EpisodeState,
    rng: &mut ChaCha20Rng,
) -> Result<(EpisodeState, usize), RunError> {
    let completed_length = t - prev.start_time;
    let mut fallbacks = 0;
    for _ in 0..DARE_RESAMPLE_LIMIT {
        let (theta_bar, fell_back) =
            posterior.sample_or_project(support, rng, MAX_SAMPLE_ATTEMPTS)?;
        if fell_back {
            fallbacks += 1;
        }
        match lqr::solve_dare(
            &theta_bar,
            cost,
            posterior.sigma_w2(),
            lqr::DEFAULT_TOL,
            lqr::DEFAULT_MAX_ITER,
        ) {
            Ok(riccati) => {
                return Ok((
                    EpisodeState {
                        k: prev.k + 1,
                        start_time: t,
                        prev_length: completed_length,
                        log_det_precision_at_start: posterior.log_det_precision(),
                        theta_bar,
                        riccati,
                        t_min: prev.t_min,
                    },
                    fallbacks,
                ));
            }
            Err(LqrError::NonConvergence { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(RunError::SampledGainFailed {
        episode: prev.k + 1,
        attempts: DARE_RESAMPLE_LIMIT,
    })
}

/// One completed (or horizon-truncated) episode in the log.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub k: usize,
    pub start_time: i64,
    pub length: i64,
    pub trigger: Trigger,
    pub macro_id: usize,
    pub theta_bar: SystemParams,
    /// Value matrix of the sampled parameter.
    pub s_bar: DMatrix<f64>,
    pub gain_bar: DMatrix<f64>,
    /// Average cost of the sampled parameter under the true noise level.
    pub avg_cost_bar: f64,
    pub log_det_precision_at_start: f64,
}

/// Configuration of a single run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub horizon: i64,
    pub t_min: i64,
    pub sigma_w2: f64,
    pub cost: CostMatrices,
    pub support: SupportSet,
    /// Posterior at t = 1.
    pub prior: PosteriorState,
    pub record_noise: bool,
}

/// Everything a run produces, before regret evaluation.
#[derive(Debug)]
pub struct RunOutput {
    /// States `x_1 ..= x_{T+1}`.
    pub states: Vec<DVector<f64>>,
    /// Controls `u_1 ..= u_T`.
    pub controls: Vec<DVector<f64>>,
    /// Stage costs `c(x_t, u_t)`.
    pub step_costs: Vec<f64>,
    pub cumulative_cost: f64,
    /// `log det Sigma_t^-1` for `t = 1 ..= T`, as used by the stopping rule.
    pub log_det_trajectory: Vec<f64>,
    pub episodes: Vec<EpisodeRecord>,
    /// Max state norm over `t = 1 ..= T`.
    pub max_state_norm: f64,
    /// Max noise norm over `t = 1 ..= T`.
    pub max_noise_norm: f64,
    /// Number of episodes started by the horizon.
    pub episode_count: usize,
    /// Number of macro-episodes.
    pub macro_count: usize,
    /// Largest `||[I; G]||_2` over the episode gains.
    pub max_gain_block_norm: f64,
    /// Projection fallbacks consumed by posterior sampling.
    pub fallback_draws: usize,
    /// Noise log, when recording was requested.
    pub noise: Option<Vec<DVector<f64>>>,
    pub final_posterior: PosteriorState,
}

/// Norm of the stacked feedback map `z = [I; G] x`.
fn gain_block_norm(gain: &DMatrix<f64>) -> f64 {
    let n = gain.ncols();
    let m = gain.nrows();
    let mut block = DMatrix::zeros(n + m, n);
    block.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    block.view_mut((n, 0), (m, n)).copy_from(gain);
    operator_norm(&block)
}

/// Run the control loop against a true parameter for `config.horizon` steps.
pub fn run(
    true_theta: &SystemParams,
    config: &RunConfig,
    env_rng: ChaCha20Rng,
    mut sampler_rng: ChaCha20Rng,
) -> Result<RunOutput, RunError> {
    let (n, m) = (true_theta.n(), true_theta.m());
    let (d, n_post) = config.prior.dims();
    if n_post != n || d != n + m {
        return Err(RunError::InvalidConfig(format!(
            "prior dims ({d}, {n_post}) do not match system dims n = {n}, m = {m}"
        )));
    }
    if config.horizon < 1 {
        return Err(RunError::InvalidConfig("horizon must be at least 1".into()));
    }
    if config.t_min < 0 {
        return Err(RunError::InvalidConfig("t_min must be nonnegative".into()));
    }

    let horizon = config.horizon;
    let mut posterior = config.prior.clone();
    let mut env = EnvState::new(n, config.sigma_w2, env_rng, config.record_noise);

    let mut episode = EpisodeState::virtual_seed(
        config.t_min,
        posterior.log_det_precision(),
        n,
        m,
    );
    let mut episodes: Vec<EpisodeRecord> = Vec::new();
    let mut macro_id = 0usize;
    let mut last_trigger = Trigger::Determinant; // episode 1 opens macro 1

    let mut states = Vec::with_capacity(horizon as usize + 1);
    let mut controls = Vec::with_capacity(horizon as usize);
    let mut step_costs = Vec::with_capacity(horizon as usize);
    let mut log_det_trajectory = Vec::with_capacity(horizon as usize);
    let mut max_state_norm: f64 = 0.0;
    let mut max_gain_block_norm: f64 = 0.0;
    let mut fallback_draws = 0usize;
    let mut prev_z: Option<Regressor> = None;

    for t in 1..=horizon {
        let x = env.x().clone();
        let norm = x.norm();
        if norm > STATE_NORM_GUARD {
            return Err(RunError::StateExplosion { t, norm });
        }
        max_state_norm = max_state_norm.max(norm);
        states.push(x.clone());

        if let Some(z) = prev_z.take() {
            posterior.update(&z, &x)?;
        }
        log_det_trajectory.push(posterior.log_det_precision());

        if let Some(trigger) = should_end_episode(&episode, t, posterior.log_det_precision()) {
            if episode.k > 0 {
                if matches!(last_trigger, Trigger::Determinant) {
                    macro_id += 1;
                }
                episodes.push(EpisodeRecord {
                    k: episode.k,
                    start_time: episode.start_time,
                    length: t - episode.start_time,
                    trigger,
                    macro_id,
                    theta_bar: episode.theta_bar.clone(),
                    s_bar: episode.riccati.s.clone(),
                    gain_bar: episode.riccati.gain.clone(),
                    avg_cost_bar: episode.riccati.average_cost,
                    log_det_precision_at_start: episode.log_det_precision_at_start,
                });
                last_trigger = trigger;
            }
            let (next, fallbacks) = begin_episode(
                &posterior,
                &config.support,
                &config.cost,
                t,
                &episode,
                &mut sampler_rng,
            )?;
            fallback_draws += fallbacks;
            max_gain_block_norm = max_gain_block_norm.max(gain_block_norm(&next.riccati.gain));
            episode = next;
        }

        let u = episode.control(&x);
        let c = env.step(true_theta, &u, &config.cost)?;
        step_costs.push(c);
        prev_z = Some(Regressor::from_state_control(&x, &u));
        controls.push(u);
    }
    // Final state x_{T+1}; kept for telescoping diagnostics, excluded from
    // the max-norm statistic.
    states.push(env.x().clone());

    // Close out the episode that was live when the horizon ended.
    if matches!(last_trigger, Trigger::Determinant) {
        macro_id += 1;
    }
    episodes.push(EpisodeRecord {
        k: episode.k,
        start_time: episode.start_time,
        length: horizon + 1 - episode.start_time,
        trigger: Trigger::Horizon,
        macro_id,
        theta_bar: episode.theta_bar.clone(),
        s_bar: episode.riccati.s.clone(),
        gain_bar: episode.riccati.gain.clone(),
        avg_cost_bar: episode.riccati.average_cost,
        log_det_precision_at_start: episode.log_det_precision_at_start,
    });

    let episode_count = episodes.len();
    Ok(RunOutput {
        states,
        controls,
        step_costs,
        cumulative_cost: env.cumulative_cost(),
        log_det_trajectory,
        episodes,
        max_state_norm,
        max_noise_norm: env.noise_max(),
        episode_count,
        macro_count: macro_id,
        max_gain_block_norm,
        fallback_draws,
        noise: env.noise_log().map(|l| l.to_vec()),
        final_posterior: posterior,
    })
}
