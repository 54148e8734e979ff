//! Acceptance suite: one test per release criterion, each printing a
//! `ACCEPTANCE <name>: PASS` line (run with `--nocapture` to see them).
//!
//! Every tolerance is pinned here, in code. The Monte Carlo criteria pin a
//! master seed; the statistical behavior of the pinned benchmark was
//! validated against independent 1000-run reference curves before freezing.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use tsde_core::lqr::{self, CostMatrices, SystemParams};
use tsde_core::posterior::{batch_refit, PosteriorState, Regressor, SupportSet};
use tsde_core::regret::{self, McConfig};
use tsde_core::sim::stream_pair;
use tsde_core::stability;
use tsde_core::tsde::{self, RunConfig, Trigger};

/// Scalar benchmark family: an uncertainty box straddling the unstable
/// boundary, unit costs and unit noise.
fn benchmark_support() -> SupportSet {
    SupportSet::box_uniform(DMatrix::from_row_slice(2, 1, &[1.0, 1.0]), 0.25).unwrap()
}

fn benchmark_prior(sigma_w2: f64) -> PosteriorState {
    PosteriorState::new(
        DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
        DMatrix::identity(2, 2),
        sigma_w2,
    )
    .unwrap()
}

fn benchmark_mc(horizon: i64, t_min: i64, n_runs: usize, master_seed: u64) -> McConfig {
    McConfig {
        horizon,
        t_min,
        sigma_w2: 1.0,
        cost: CostMatrices::identity(1, 1),
        support: benchmark_support(),
        prior: benchmark_prior(1.0),
        n_runs,
        master_seed,
        checkpoints: McConfig::default_checkpoints(horizon),
        record_noise: false,
    }
}

/// Two-state support whose closed loops have spectral radius 1/2 but induced
/// norm above 100.
fn shear_support() -> SupportSet {
    let theta = SystemParams::new(
        DMatrix::from_row_slice(2, 2, &[0.5, 100.0, 0.0, 0.5]),
        DMatrix::zeros(2, 1),
    )
    .unwrap();
    SupportSet::singleton(theta.stacked())
}

/// Small certified two-state box for the multivariate power checks.
fn two_state_support() -> SupportSet {
    let theta = SystemParams::new(
        DMatrix::from_row_slice(2, 2, &[0.6, 0.1, 0.0, 0.5]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
    )
    .unwrap();
    SupportSet::box_uniform(theta.stacked(), 0.05).unwrap()
}

#[test]
fn regret_scaling_slope() {
    let support = benchmark_support();
    let cost = CostMatrices::identity(1, 1);
    let cert = stability::certify(&support, &cost, None, 64, None, 2024).unwrap();
    // Configured minimum length: above the certified threshold, long enough
    // that the 500..8000 window sits in the settled regime.
    let t_min = 80i64;
    assert!(t_min >= cert.t_min_star as i64);

    let cfg = benchmark_mc(8000, t_min, 200, 2024);
    let report = regret::run_monte_carlo(&cfg, Some(&cert)).unwrap();
    assert_eq!(report.failures, 0, "all 200 runs must complete");
    let fit = report.slope.expect("five positive checkpoints");
    assert!(
        (0.4..=0.65).contains(&fit.slope),
        "log-log slope {} outside [0.4, 0.65]",
        fit.slope
    );
    assert!(
        fit.r_squared >= 0.95,
        "log-log fit r^2 {} below 0.95",
        fit.r_squared
    );
    println!(
        "ACCEPTANCE regret_scaling_slope: PASS (slope = {:.4}, r^2 = {:.4}, 200 runs, T in 500..=8000)",
        fit.slope, fit.r_squared
    );
}

#[test]
fn riccati_solver_accuracy() {
    // 100 random stabilizable scalar systems against the closed-form root.
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    for i in 0..100 {
        let a: f64 = rng.random_range(-1.999..1.999);
        let b: f64 = rng.random_range(0.3..2.0);
        let q: f64 = rng.random_range(0.5..2.0);
        let r: f64 = rng.random_range(0.5..2.0);
        let theta = SystemParams::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
        )
        .unwrap();
        let cost = CostMatrices::new(
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
        )
        .unwrap();
        let sol = lqr::solve_dare(&theta, &cost, 1.0, 1e-13, 20_000).unwrap();
        let b2 = b * b;
        let lin = r - q * b2 - a * a * r;
        let s_star = (-lin + (lin * lin + 4.0 * b2 * q * r).sqrt()) / (2.0 * b2);
        assert!(
            (sol.s[(0, 0)] - s_star).abs() <= 1e-10,
            "scalar instance {i}: solver {} vs closed form {s_star}",
            sol.s[(0, 0)]
        );
    }

    // Multivariate instances n <= 4: residual of the returned matrix under
    // an independent evaluation of the Riccati operator.
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut max_residual: f64 = 0.0;
    for i in 0..40 {
        let n = 2 + i % 3; // 2, 3, 4
        let m = 1 + i % 2;
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let rho = stability::spectral_radius(&a, 1e-12).unwrap();
        if rho > 1e-9 {
            a *= rng.random_range(0.3..1.2) / rho;
        }
        let b = DMatrix::from_fn(n, m, |_, _| {
            rng.random_range(0.5..1.5) * if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 }
        });
        let theta = SystemParams::new(a, b).unwrap();
        let cost = CostMatrices::identity(n, m);
        let sol = lqr::solve_dare(&theta, &cost, 1e-12, 1e-12, 20_000)
            .unwrap_or_else(|e| panic!("instance {i} failed: {e}"));
        let mapped = lqr::riccati_map(&sol.s, &theta, &cost).unwrap();
        let residual = (&mapped - &sol.s).norm();
        max_residual = max_residual.max(residual);
        assert!(
            residual <= 1e-12,
            "instance {i} (n = {n}): residual {residual:.3e}"
        );
    }
    println!(
        "ACCEPTANCE riccati_solver_accuracy: PASS (100 scalar oracles at 1e-10, 40 instances n<=4, max residual {max_residual:.2e})"
    );
}

#[test]
fn posterior_recursive_batch_equivalence() {
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let mut max_gap: f64 = 0.0;
    for (n, m) in [(1usize, 1usize), (2, 2), (3, 2)] {
        let d = n + m;
        let prior = PosteriorState::new(
            DMatrix::from_fn(d, n, |_, _| rng.random_range(-0.5..0.5)),
            DMatrix::identity(d, d) * rng.random_range(0.5..2.0),
            0.8,
        )
        .unwrap();
        let history: Vec<(Regressor, DVector<f64>)> = (0..500)
            .map(|_| {
                (
                    Regressor::new(DVector::from_fn(d, |_, _| {
                        rng.sample::<f64, _>(StandardNormal)
                    })),
                    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)),
                )
            })
            .collect();
        let mut recursive = prior.clone();
        for (z, y) in &history {
            recursive.update(z, y).unwrap();
        }
        let batch = batch_refit(&history, &prior).unwrap();
        let mean_gap = (batch.means() - recursive.means()).amax();
        let sigma_gap = (batch.sigma() - recursive.sigma()).amax();
        max_gap = max_gap.max(mean_gap).max(sigma_gap);
        assert!(
            mean_gap <= 1e-8 && sigma_gap <= 1e-8,
            "d = {d}: recursive vs batch gaps {mean_gap:.2e}, {sigma_gap:.2e}"
        );
    }
    println!(
        "ACCEPTANCE posterior_recursive_batch_equivalence: PASS (500-step histories, d in {{2,4,5}}, max gap {max_gap:.2e})"
    );
}

fn episode_law_violations(cfg: &McConfig) -> usize {
    let report = regret::run_monte_carlo(cfg, None).unwrap();
    assert_eq!(report.failures, 0);
    let mut violations = 0;
    for rec in &report.records {
        let mut prev_len = cfg.t_min + 1;
        for ep in &rec.episode_log {
            if matches!(ep.trigger, Trigger::Horizon) {
                break;
            }
            if ep.length < cfg.t_min + 1 || ep.length > prev_len + 1 {
                violations += 1;
            }
            prev_len = ep.length;
        }
        if !rec.diagnostics.episode_length_law_ok {
            violations += 1;
        }
    }
    violations
}

#[test]
fn episode_length_law() {
    let support = benchmark_support();
    let cost = CostMatrices::identity(1, 1);
    let cert = stability::certify(&support, &cost, None, 64, None, 41).unwrap();
    let auto = cert.t_min_star as i64;
    let mut total_runs = 0;
    for t_min in [0, auto, auto + 5] {
        let cfg = benchmark_mc(400, t_min, 1000, 314_000 + t_min as u64);
        assert_eq!(episode_law_violations(&cfg), 0, "t_min = {t_min}");
        total_runs += cfg.n_runs;
    }
    println!(
        "ACCEPTANCE episode_length_law: PASS ({total_runs} runs, t_min in {{0, {auto}, {}}}, 0 violations)",
        auto + 5
    );
}

#[test]
fn determinant_ratio_bounds() {
    // Bound check across a 1000-run batch (tracked log-determinants).
    let cfg = benchmark_mc(400, 6, 1000, 271_828);
    let report = regret::run_monte_carlo(&cfg, None).unwrap();
    assert_eq!(report.failures, 0);
    assert_eq!(
        report.det_ratio_rate, 1.0,
        "in-episode determinant ratio must stay at most 2 in every episode"
    );
    let max_ratio = report
        .records
        .iter()
        .map(|r| r.diagnostics.max_in_episode_det_ratio)
        .fold(0.0_f64, f64::max);
    assert!(max_ratio <= 2.0 + 1e-9);

    // Instrument accuracy: telescoped rank-one increments against a from-
    // scratch determinant at every step, scalar and two-state systems.
    let mut max_err: f64 = 0.0;
    for (support, n, seed) in [
        (benchmark_support(), 1usize, 5u64),
        (two_state_support(), 2usize, 6u64),
    ] {
        let (d, _) = support.dims();
        // Prior variance on the scale of the box so rejection stays cheap.
        let prior_var = support.halfwidths().amax().powi(2).max(1e-4);
        let prior = PosteriorState::new(
            support.center().clone(),
            DMatrix::identity(d, d) * prior_var,
            1.0,
        )
        .unwrap();
        let run_cfg = RunConfig {
            horizon: 500,
            t_min: 4,
            sigma_w2: 1.0,
            cost: CostMatrices::identity(n, d - n),
            support: support.clone(),
            prior: prior.clone(),
            record_noise: false,
        };
        for run_idx in 0..8u64 {
            let (env_rng, mut sampler_rng) = stream_pair(seed, run_idx);
            let theta = prior.sample(&support, &mut sampler_rng, 10_000).unwrap();
            let out = tsde::run(&theta, &run_cfg, env_rng, sampler_rng).unwrap();
            // Direct route: accumulate the precision and take its Cholesky
            // log-determinant at every step.
            let mut precision = prior.sigma_inv().clone();
            for (t, tracked) in out.log_det_trajectory.iter().enumerate() {
                if t > 0 {
                    let x = &out.states[t - 1];
                    let u = &out.controls[t - 1];
                    let mut z = DVector::zeros(d);
                    z.rows_mut(0, n).copy_from(x);
                    z.rows_mut(n, d - n).copy_from(u);
                    precision += &z * z.transpose();
                }
                let chol = Cholesky::new(precision.clone()).unwrap();
                let direct: f64 =
                    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let err = (tracked - direct).abs();
                max_err = max_err.max(err);
                assert!(
                    err <= 1e-6,
                    "run {run_idx} t = {}: tracked {tracked} vs direct {direct}",
                    t + 1
                );
            }
        }
    }
    println!(
        "ACCEPTANCE determinant_ratio_bounds: PASS (1000-run ratio max {max_ratio:.6} <= 2, instrument error {max_err:.2e} <= 1e-6)"
    );
}

#[test]
fn minimum_length_certificate_powers() {
    let cost_scalar = CostMatrices::identity(1, 1);
    let cost_two = CostMatrices::identity(2, 1);
    let cases: Vec<(&str, SupportSet, CostMatrices)> = vec![
        ("scalar box", benchmark_support(), cost_scalar),
        ("shear singleton", shear_support(), cost_two.clone()),
        ("two-state box", two_state_support(), cost_two),
    ];
    for (name, support, cost) in cases {
        let cert = stability::certify(&support, &cost, None, 48, None, 13)
            .unwrap_or_else(|e| panic!("{name} must certify: {e}"));
        let dbar = cert.delta + cert.epsilon;
        assert!(
            cert.alpha * dbar.powi(cert.t_min_star as i32) <= 1.0 + 1e-12,
            "{name}: alpha (eps+delta)^t* must be at most one"
        );
        let loops = stability::sampled_closed_loops(&support, &cost, 48, 13).unwrap();
        let t_star = cert.t_min_star.max(1);
        for l in &loops {
            let mut power = l.clone();
            for _ in 1..t_star {
                power *= l;
            }
            for tau in t_star..=3 * t_star {
                assert!(
                    stability::operator_norm(&power) <= 1.0 + 1e-9,
                    "{name}: ||L^{tau}|| exceeds one"
                );
                power *= l;
            }
        }
        println!(
            "  {name}: delta = {:.4}, epsilon = {:.4}, alpha = {:.3}, t* = {}, {} loops checked",
            cert.delta,
            cert.epsilon,
            cert.alpha,
            cert.t_min_star,
            loops.len()
        );
    }
    println!("ACCEPTANCE minimum_length_certificate_powers: PASS");
}

#[test]
fn state_norm_bound() {
    let support = benchmark_support();
    let cost = CostMatrices::identity(1, 1);
    let cert = stability::certify(&support, &cost, None, 64, None, 51).unwrap();
    let cfg = benchmark_mc(500, cert.t_min_star as i64, 1000, 161_803);
    let report = regret::run_monte_carlo(&cfg, Some(&cert)).unwrap();
    assert_eq!(report.failures, 0);
    assert_eq!(
        report.state_bound_rate,
        Some(1.0),
        "max state norm must stay below alpha0 * max noise norm in every run"
    );
    let alpha0 = cert.state_bound_factor(cert.t_min_star as i64).unwrap();
    let worst = report
        .records
        .iter()
        .map(|r| r.max_state_norm / r.max_noise_norm.max(1e-300))
        .fold(0.0_f64, f64::max);
    println!(
        "ACCEPTANCE state_norm_bound: PASS (1000 runs, alpha0 = {alpha0:.1}, worst X/W = {worst:.2})"
    );
}

#[test]
fn episode_count_bound() {
    // Independent recount of episodes and macro-episodes from the logs.
    let mut checked = 0;
    for (t_min, seed) in [(0i64, 1u64), (6, 2), (18, 3)] {
        let cfg = benchmark_mc(600, t_min, 300, 100 + seed);
        let report = regret::run_monte_carlo(&cfg, None).unwrap();
        assert_eq!(report.failures, 0);
        for rec in &report.records {
            let k = rec.episode_log.len();
            assert_eq!(k, rec.episode_count);
            let mut macros = 0usize;
            let mut prev_trigger: Option<Trigger> = None;
            for ep in &rec.episode_log {
                let new_macro =
                    matches!(prev_trigger, None | Some(Trigger::Determinant));
                if new_macro {
                    macros += 1;
                }
                assert_eq!(ep.macro_id, macros, "macro ids must be contiguous");
                prev_trigger = Some(ep.trigger);
            }
            assert_eq!(macros, rec.macro_count);
            assert!(
                (k as f64) <= (2.0 * macros as f64 * rec.horizon as f64).sqrt(),
                "episode count {k} exceeds sqrt(2 * {macros} * {})",
                rec.horizon
            );
            checked += 1;
        }
    }
    println!(
        "ACCEPTANCE episode_count_bound: PASS ({checked} runs, count <= sqrt(2 M T) with recounted M)"
    );
}

#[test]
fn spectral_radius_vs_norm_gap() {
    let shear = DMatrix::from_row_slice(2, 2, &[0.5, 100.0, 0.0, 0.5]);
    let rho = stability::spectral_radius(&shear, 1e-12).unwrap();
    assert!((rho - 0.5).abs() <= 1e-10, "rho = {rho}");
    let norm = stability::operator_norm(&shear);
    assert!(norm >= 100.0, "norm = {norm}");

    // The control loop survives a support whose closed loops have this
    // transient growth, with the minimum length taken from the certificate.
    let support = shear_support();
    let cost = CostMatrices::identity(2, 1);
    let cert = stability::certify(&support, &cost, None, 16, None, 23).unwrap();
    let prior = PosteriorState::new(
        support.center().clone(),
        DMatrix::identity(3, 3),
        1.0,
    )
    .unwrap();
    let run_cfg = RunConfig {
        horizon: 2000,
        t_min: cert.t_min_star as i64,
        sigma_w2: 1.0,
        cost,
        support: support.clone(),
        prior,
        record_noise: false,
    };
    let theta = SystemParams::from_stacked(support.center(), 2).unwrap();
    let (env_rng, sampler_rng) = stream_pair(404, 0);
    let out = tsde::run(&theta, &run_cfg, env_rng, sampler_rng).unwrap();
    assert!(out.max_state_norm < tsde::STATE_NORM_GUARD);
    println!(
        "ACCEPTANCE spectral_radius_vs_norm_gap: PASS (rho = {rho:.10}, norm = {norm:.1}, run to T = 2000 with t_min = {} peaked at ||x|| = {:.1})",
        cert.t_min_star, out.max_state_norm
    );
}
