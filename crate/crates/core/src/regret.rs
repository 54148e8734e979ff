//! Monte Carlo regret estimation and per-run diagnostics.
//!
//! Each run draws a true parameter from the truncated prior, simulates the
//! control loop, and evaluates the regret `sum_t c(x_t, u_t) - T J(theta_1)`
//! against the optimal average cost of the drawn parameter. The regret is
//! split pathwise into
//!
//! - `r0`: episode-length-weighted average-cost gap
//!   `sum_k T_k J(theta_bar_k) - T J(theta_1)`,
//! - `r1`: the telescoping value-function sum
//!   `sum_k sum_t [x_t' S_k x_t - x_{t+1}' S_k x_{t+1}]`,
//! - `r2`: the parameter-mismatch sum
//!   `sum_k sum_t [(theta_1'z_t)' S_k (theta_1'z_t) - (theta_bar_k'z_t)' S_k (theta_bar_k'z_t)]`,
//!
//! plus an explicitly tracked martingale residual `B` with
//! `regret = r0 + r1 + r2 + B` exactly (up to Riccati solver tolerance): the
//! per-step average-cost identity
//! `J_k + x_t'S_k x_t = c(x_t, u_t) + E[x_{t+1}' S_k x_{t+1} | x_t]`
//! holds exactly at the sampled parameter's solution, and `B` collects the
//! realized-minus-expected next-state terms, which are mean zero.
//!
//! Runs are independent rayon tasks; the aggregate depends only on the
//! master seed and configuration, never on scheduling.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lqr::{self, CostMatrices, LqrError, SystemParams};
use crate::posterior::{PosteriorError, PosteriorState, SupportSet, MAX_SAMPLE_ATTEMPTS};
use crate::sim::stream_pair;
use crate::stability::StabilityCertificate;
use crate::tsde::{self, RunConfig, RunError, RunOutput, Trigger};

#[derive(Debug, Error)]
pub enum McError {
    #[error(transparent)]
    Lqr(#[from] LqrError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("t_min = {t_min} is below the certified minimum {t_min_star}")]
    TMinBelowThreshold { t_min: i64, t_min_star: usize },
    #[error("slope fit needs at least 3 positive checkpoints, got {have}")]
    InsufficientPoints { have: usize },
    #[error("all {n_runs} runs failed; first error: {first}")]
    AllRunsFailed { n_runs: usize, first: String },
}

/// Monte Carlo experiment configuration.
#[derive(Debug, Clone)]
pub struct McConfig {
    pub horizon: i64,
    pub t_min: i64,
    pub sigma_w2: f64,
    pub cost: CostMatrices,
    pub support: SupportSet,
    /// Prior at t = 1; also the distribution of the true parameter.
    pub prior: PosteriorState,
    pub n_runs: usize,
    pub master_seed: u64,
    /// Times at which cumulative regret is recorded; sorted, within horizon.
    pub checkpoints: Vec<i64>,
    pub record_noise: bool,
}

impl McConfig {
    /// Geometrically spaced checkpoints `{T/16, T/8, T/4, T/2, T}`.
    pub fn default_checkpoints(horizon: i64) -> Vec<i64> {
        let mut out: Vec<i64> = [16, 8, 4, 2, 1]
            .iter()
            .map(|div| horizon / div)
            .filter(|t| *t >= 1)
            .collect();
        out.dedup();
        out
    }

    fn run_config(&self) -> RunConfig {
        RunConfig {
            horizon: self.horizon,
            t_min: self.t_min,
            sigma_w2: self.sigma_w2,
            cost: self.cost.clone(),
            support: self.support.clone(),
            prior: self.prior.clone(),
            record_noise: self.record_noise,
        }
    }
}

/// Slim episode entry carried in run records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub k: usize,
    pub start_time: i64,
    pub length: i64,
    pub trigger: Trigger,
    pub macro_id: usize,
    pub theta_bar: Vec<Vec<f64>>,
}

/// Per-run diagnostics: each flag is a measured bound, not an assumption.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// `t_min + 1 <= T_k <= T_{k-1} + 1` over completed episodes.
    pub episode_length_law_ok: bool,
    /// Determinant-triggered ends really crossed the halving threshold after
    /// the minimum length.
    pub determinant_trigger_sound: bool,
    /// `det Sigma_t^-1 / det Sigma_{t_k}^-1 <= 2` strictly inside episodes,
    /// past the minimum length.
    pub in_episode_det_ratio_ok: bool,
    /// First-phase ratio bound `(1 + M_G^2 X_T^2 / (lambda_min sigma_w2))^t_min`.
    pub first_phase_det_ratio_ok: bool,
    /// `K_T <= sqrt(2 M T)`.
    pub episode_count_bound_ok: bool,
    /// `X_T <= alpha0 W_T`; `None` without a certificate or when the
    /// certificate cannot produce `alpha0` for this `t_min`.
    pub state_bound_ok: Option<bool>,
    pub state_bound_factor: Option<f64>,
    pub max_in_episode_det_ratio: f64,
    pub episode_count_slack: f64,
}

impl DiagnosticsReport {
    pub fn all_deterministic_ok(&self) -> bool {
        self.episode_length_law_ok
            && self.determinant_trigger_sound
            && self.in_episode_det_ratio_ok
            && self.first_phase_det_ratio_ok
            && self.episode_count_bound_ok
    }
}

/// Everything recorded about one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub master_seed: u64,
    /// Stacked true parameter, row-major.
    pub true_theta: Vec<Vec<f64>>,
    pub horizon: i64,
    pub cumulative_cost: f64,
    /// `J(theta_1)`.
    pub optimal_average_cost: f64,
    /// `cumulative_cost - horizon * J(theta_1)`.
    pub regret: f64,
    /// Cumulative regret at each checkpoint time.
    pub checkpoints: Vec<(i64, f64)>,
    pub episode_log: Vec<EpisodeSummary>,
    pub max_state_norm: f64,
    pub max_noise_norm: f64,
    pub episode_count: usize,
    pub macro_count: usize,
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    /// Martingale residual closing the pathwise identity.
    pub bellman_residual: f64,
    pub fallback_draws: usize,
    pub diagnostics: DiagnosticsReport,
}

/// Pathwise regret decomposition of one run.
#[derive(Debug, Clone, Copy)]
pub struct Decomposition {
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub bellman_residual: f64,
}

fn quad_form(s: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (v.transpose() * s * v)[(0, 0)]
}

/// Split a run's regret into the three pathwise terms plus the martingale
/// residual. `j_star` is the optimal average cost of the true parameter.
pub fn decompose(output: &RunOutput, true_theta: &SystemParams, j_star: f64) -> Decomposition {
    let horizon = output.step_costs.len() as i64;
    let theta1 = true_theta.stacked();
    let mut r0 = -(horizon as f64) * j_star;
    let mut r1 = 0.0;
    let mut r2 = 0.0;
    let mut bellman = 0.0;
    for rec in &output.episodes {
        let s_k = &rec.s_bar;
        let theta_bar = rec.theta_bar.stacked();
        let end = (rec.start_time + rec.length - 1).min(horizon);
        r0 += rec.length as f64 * rec.avg_cost_bar;
        for t in rec.start_time..=end {
            let x_t = &output.states[(t - 1) as usize];
            let x_next = &output.states[t as usize];
            let u_t = &output.controls[(t - 1) as usize];
            let mut z = DVector::zeros(x_t.len() + u_t.len());
            z.rows_mut(0, x_t.len()).copy_from(x_t);
            z.rows_mut(x_t.len(), u_t.len()).copy_from(u_t);

            r1 += quad_form(s_k, x_t) - quad_form(s_k, x_next);
            let true_pred = theta1.transpose() * &z;
            let sampled_pred = theta_bar.transpose() * &z;
            r2 += quad_form(s_k, &true_pred) - quad_form(s_k, &sampled_pred);
            // Realized minus expected next-state value, minus the noise term
            // that the average cost accounts for.
            bellman += quad_form(s_k, x_next) - quad_form(s_k, &true_pred) - rec.avg_cost_bar;
        }
    }
    Decomposition {
        r0,
        r1,
        r2,
        bellman_residual: bellman,
    }
}

/// Evaluate the measured bounds for one run.
pub fn diagnostics_check(
    output: &RunOutput,
    cert: Option<&StabilityCertificate>,
    t_min: i64,
    lambda_min_prior_precision: f64,
    sigma_w2: f64,
) -> DiagnosticsReport {
    let horizon = output.step_costs.len() as i64;
    let ln2 = std::f64::consts::LN_2;
    let ldp = &output.log_det_trajectory;

    let mut length_law = true;
    let mut det_sound = true;
    let mut in_episode_ok = true;
    let mut first_phase_ok = true;
    let mut max_ratio: f64 = 1.0;

    // Log-space cap for the first phase of an episode:
    // t_min * ln(1 + M_G^2 X_T^2 / (lambda_min sigma_w2)).
    let first_phase_cap = if sigma_w2 > 0.0 && t_min > 0 && lambda_min_prior_precision > 0.0 {
        let m = output.max_gain_block_norm.powi(2) * output.max_state_norm.powi(2)
            / (lambda_min_prior_precision * sigma_w2);
        t_min as f64 * (1.0 + m).ln()
    } else if t_min == 0 {
        0.0
    } else {
        f64::INFINITY
    };

    let mut prev_len = t_min + 1;
    for rec in &output.episodes {
        let start_idx = (rec.start_time - 1) as usize;
        let end = (rec.start_time + rec.length - 1).min(horizon);
        if !matches!(rec.trigger, Trigger::Horizon) {
            if rec.length < t_min + 1 || rec.length > prev_len + 1 {
                length_law = false;
            }
            prev_len = rec.length;
        }
        if matches!(rec.trigger, Trigger::Determinant) {
            let t_next = rec.start_time + rec.length;
            let gap = ldp[(t_next - 1) as usize] - ldp[start_idx];
            if !(gap > ln2 && rec.length > t_min) {
                det_sound = false;
            }
        }
        let tau = rec.start_time + t_min;
        for t in rec.start_time..=end {
            let gap = ldp[(t - 1) as usize] - ldp[start_idx];
            if t > tau {
                // Inside the episode, past the minimum length: ratio at most 2.
                max_ratio = max_ratio.max(gap.exp());
                if gap > ln2 + 1e-9 {
                    in_episode_ok = false;
                }
            } else if gap > first_phase_cap + 1e-9 {
                first_phase_ok = false;
            }
        }
    }

    let k = output.episode_count as f64;
    let bound = (2.0 * output.macro_count as f64 * horizon as f64).sqrt();
    let episode_count_bound_ok = k <= bound + 1e-9;

    let state_bound_factor = cert.and_then(|c| c.state_bound_factor(t_min));
    let state_bound_ok = state_bound_factor.map(|alpha0| {
        output.max_state_norm <= alpha0 * output.max_noise_norm + 1e-9
    });

    DiagnosticsReport {
        episode_length_law_ok: length_law,
        determinant_trigger_sound: det_sound,
        in_episode_det_ratio_ok: in_episode_ok,
        first_phase_det_ratio_ok: first_phase_ok,
        episode_count_bound_ok,
        state_bound_ok,
        state_bound_factor,
        max_in_episode_det_ratio: max_ratio,
        episode_count_slack: bound - k,
    }
}

/// Turn a raw run into a record: optimal cost, regret, checkpoints,
/// decomposition, diagnostics.
pub fn evaluate_run(
    output: &RunOutput,
    true_theta: &SystemParams,
    cfg: &McConfig,
    cert: Option<&StabilityCertificate>,
    run_index: usize,
) -> Result<RunRecord, McError> {
    let sol = lqr::solve_dare(
        true_theta,
        &cfg.cost,
        cfg.sigma_w2,
        lqr::DEFAULT_TOL,
        lqr::DEFAULT_MAX_ITER,
    )?;
    let j_star = sol.average_cost;
    let horizon = cfg.horizon;

    let mut cumsum = 0.0;
    let mut cum_at = vec![0.0; output.step_costs.len() + 1];
    for (i, c) in output.step_costs.iter().enumerate() {
        cumsum += c;
        cum_at[i + 1] = cumsum;
    }
    let checkpoints = cfg
        .checkpoints
        .iter()
        .filter(|t| **t >= 1 && **t <= horizon)
        .map(|t| (*t, cum_at[*t as usize] - *t as f64 * j_star))
        .collect();

    let decomp = decompose(output, true_theta, j_star);
    let lambda_min = cfg
        .prior
        .sigma_inv()
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let diagnostics = diagnostics_check(output, cert, cfg.t_min, lambda_min, cfg.sigma_w2);

    Ok(RunRecord {
        run_index,
        master_seed: cfg.master_seed,
        true_theta: matrix_rows(&true_theta.stacked()),
        horizon,
        cumulative_cost: output.cumulative_cost,
        optimal_average_cost: j_star,
        regret: output.cumulative_cost - horizon as f64 * j_star,
        checkpoints,
        episode_log: output
            .episodes
            .iter()
            .map(|e| EpisodeSummary {
                k: e.k,
                start_time: e.start_time,
                length: e.length,
                trigger: e.trigger,
                macro_id: e.macro_id,
                theta_bar: matrix_rows(&e.theta_bar.stacked()),
            })
            .collect(),
        max_state_norm: output.max_state_norm,
        max_noise_norm: output.max_noise_norm,
        episode_count: output.episode_count,
        macro_count: output.macro_count,
        r0: decomp.r0,
        r1: decomp.r1,
        r2: decomp.r2,
        bellman_residual: decomp.bellman_residual,
        fallback_draws: output.fallback_draws,
        diagnostics,
    })
}

/// Mean regret at a checkpoint with its standard error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointStat {
    pub t: i64,
    pub mean_regret: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Ordinary least squares of `log regret` on `log T`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Checkpoints skipped for nonpositive mean regret.
    pub skipped: usize,
}

/// Fit `log y = slope * log T + intercept`, skipping nonpositive values.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<SlopeFit, McError> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(t, y)| *t > 0.0 && *y > 0.0)
        .map(|(t, y)| (t.ln(), y.ln()))
        .collect();
    let skipped = points.len() - usable.len();
    if usable.len() < 3 {
        return Err(McError::InsufficientPoints { have: usable.len() });
    }
    let n = usable.len() as f64;
    let mean_x = usable.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = usable.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = usable.iter().map(|(x, _)| (x - mean_x).powi(2)).sum();
    let sxy: f64 = usable
        .iter()
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let syy: f64 = usable.iter().map(|(_, y)| (y - mean_y).powi(2)).sum();
    if sxx == 0.0 {
        return Err(McError::InvalidConfig(
            "slope fit needs at least two distinct checkpoint times".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(SlopeFit {
        slope,
        intercept,
        r_squared,
        skipped,
    })
}

/// Aggregate over all runs of one experiment.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateReport {
    pub n_runs: usize,
    pub failures: usize,
    pub first_failure: Option<String>,
    pub checkpoint_stats: Vec<CheckpointStat>,
    pub slope: Option<SlopeFit>,
    pub mean_r0: f64,
    pub mean_r1: f64,
    pub mean_r2: f64,
    pub mean_bellman_residual: f64,
    /// Fraction of runs satisfying each measured bound.
    pub episode_length_law_rate: f64,
    pub det_ratio_rate: f64,
    pub episode_count_bound_rate: f64,
    pub state_bound_rate: Option<f64>,
    pub runs_with_fallback: usize,
    pub records: Vec<RunRecord>,
}

/// Draw a true parameter from the prior restricted to the support.
fn draw_true_theta(
    prior: &PosteriorState,
    support: &SupportSet,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> Result<SystemParams, PosteriorError> {
    prior.sample(support, rng, MAX_SAMPLE_ATTEMPTS)
}

/// Run the full Monte Carlo experiment. The per-run hook sees every raw run
/// output (for flag-gated persistence) in run-index order semantics: it may
/// be called from worker threads, but always with the matching index.
pub fn run_monte_carlo_with<F>(
    cfg: &McConfig,
    cert: Option<&StabilityCertificate>,
    on_run: F,
) -> Result<AggregateReport, McError>
where
    F: Fn(usize, &RunOutput, &RunRecord) + Sync,
{
    if cfg.n_runs < 2 {
        return Err(McError::InvalidConfig("n_runs must be at least 2".into()));
    }
    if let Some(c) = cert {
        if (cfg.t_min as i128) < c.t_min_star as i128 {
            return Err(McError::TMinBelowThreshold {
                t_min: cfg.t_min,
                t_min_star: c.t_min_star,
            });
        }
    }
    let run_cfg = cfg.run_config();
    let results: Vec<Result<RunRecord, McError>> = (0..cfg.n_runs)
        .into_par_iter()
        .map(|i| {
            let (env_rng, mut sampler_rng) = stream_pair(cfg.master_seed, i as u64);
            let true_theta = draw_true_theta(&cfg.prior, &cfg.support, &mut sampler_rng)?;
            let output = tsde::run(&true_theta, &run_cfg, env_rng, sampler_rng)?;
            let record = evaluate_run(&output, &true_theta, cfg, cert, i)?;
            on_run(i, &output, &record);
            Ok(record)
        })
        .collect();

    let mut records = Vec::with_capacity(cfg.n_runs);
    let mut failures = 0;
    let mut first_failure = None;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                failures += 1;
                if first_failure.is_none() {
                    first_failure = Some(e.to_string());
                }
            }
        }
    }
    if records.is_empty() {
        return Err(McError::AllRunsFailed {
            n_runs: cfg.n_runs,
            first: first_failure.unwrap_or_default(),
        });
    }

    let checkpoint_stats = checkpoint_statistics(&records, &cfg.checkpoints);
    let slope = fit_slope(
        &checkpoint_stats
            .iter()
            .map(|s| (s.t as f64, s.mean_regret))
            .collect::<Vec<_>>(),
    )
    .ok();

    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&RunRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let rate = |f: &dyn Fn(&RunRecord) -> bool| {
        records.iter().filter(|r| f(r)).count() as f64 / n
    };
    let state_rates: Vec<bool> = records
        .iter()
        .filter_map(|r| r.diagnostics.state_bound_ok)
        .collect();
    let state_bound_rate = (!state_rates.is_empty())
        .then(|| state_rates.iter().filter(|b| **b).count() as f64 / state_rates.len() as f64);

    Ok(AggregateReport {
        n_runs: cfg.n_runs,
        failures,
        first_failure,
        checkpoint_stats,
        slope,
        mean_r0: mean(&|r| r.r0),
        mean_r1: mean(&|r| r.r1),
        mean_r2: mean(&|r| r.r2),
        mean_bellman_residual: mean(&|r| r.bellman_residual),
        episode_length_law_rate: rate(&|r| r.diagnostics.episode_length_law_ok),
        det_ratio_rate: rate(&|r| {
            r.diagnostics.in_episode_det_ratio_ok && r.diagnostics.determinant_trigger_sound
        }),
        episode_count_bound_rate: rate(&|r| r.diagnostics.episode_count_bound_ok),
        state_bound_rate,
        runs_with_fallback: records.iter().filter(|r| r.fallback_draws > 0).count(),
        records,
    })
}

/// [`run_monte_carlo_with`] without a per-run hook.
pub fn run_monte_carlo(
    cfg: &McConfig,
    cert: Option<&StabilityCertificate>,
) -> Result<AggregateReport, McError> {
    run_monte_carlo_with(cfg, cert, |_, _, _| {})
}

fn checkpoint_statistics(records: &[RunRecord], checkpoints: &[i64]) -> Vec<CheckpointStat> {
    checkpoints
        .iter()
        .filter_map(|t| {
            let values: Vec<f64> = records
                .iter()
                .filter_map(|r| {
                    r.checkpoints
                        .iter()
                        .find(|(ct, _)| ct == t)
                        .map(|(_, v)| *v)
                })
                .collect();
            if values.is_empty() {
                return None;
            }
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            Some(CheckpointStat {
                t: *t,
                mean_regret: mean,
                std_error: (var / n as f64).sqrt(),
                n,
            })
        })
        .collect()
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
