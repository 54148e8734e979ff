//! Artifact writers. Every CSV starts with a `#`-prefixed column schema
//! line; floats are written with 17 significant digits so records round-trip
//! through text losslessly. Only `summary.txt` carries a timestamp.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use tsde_core::regret::AggregateReport;
use tsde_core::tsde::RunOutput;

use crate::CliError;

/// 17 significant digits: enough to reproduce any finite f64 exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn flag(v: bool) -> &'static str {
    if v {
        "1"
    } else {
        "0"
    }
}

pub fn write_runs_csv(path: &Path, report: &AggregateReport) -> Result<(), CliError> {
    let mut out = String::new();
    let theta_cols = report
        .records
        .first()
        .map(|r| {
            let rows = r.true_theta.len();
            let cols = r.true_theta.first().map_or(0, |row| row.len());
            (rows, cols)
        })
        .unwrap_or((0, 0));
    let mut header = String::from(
        "# columns: run_index, horizon, cumulative_cost, optimal_average_cost, regret, \
         max_state_norm, max_noise_norm, episode_count, macro_count, r0, r1, r2, \
         bellman_residual, fallback_draws, episode_length_law_ok, det_trigger_sound_ok, \
         in_episode_det_ratio_ok, first_phase_det_ratio_ok, episode_count_bound_ok, \
         state_bound_ok(-1=n/a)",
    );
    for i in 0..theta_cols.0 {
        for j in 0..theta_cols.1 {
            let _ = write!(header, ", theta_{i}_{j}");
        }
    }
    out.push_str(&header);
    out.push('\n');
    for r in &report.records {
        let d = &r.diagnostics;
        let state = match d.state_bound_ok {
            None => "-1".to_string(),
            Some(ok) => flag(ok).to_string(),
        };
        let mut line = format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.run_index,
            r.horizon,
            fmt_f64(r.cumulative_cost),
            fmt_f64(r.optimal_average_cost),
            fmt_f64(r.regret),
            fmt_f64(r.max_state_norm),
            fmt_f64(r.max_noise_norm),
            r.episode_count,
            r.macro_count,
            fmt_f64(r.r0),
            fmt_f64(r.r1),
            fmt_f64(r.r2),
            fmt_f64(r.bellman_residual),
            r.fallback_draws,
            flag(d.episode_length_law_ok),
            flag(d.determinant_trigger_sound),
            flag(d.in_episode_det_ratio_ok),
            flag(d.first_phase_det_ratio_ok),
            flag(d.episode_count_bound_ok),
            state,
        );
        for row in &r.true_theta {
            for v in row {
                let _ = write!(line, ",{}", fmt_f64(*v));
            }
        }
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn write_checkpoints_csv(path: &Path, report: &AggregateReport) -> Result<(), CliError> {
    let mut out = String::from("# columns: t, mean_regret, std_error, n_runs\n");
    for s in &report.checkpoint_stats {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            s.t,
            fmt_f64(s.mean_regret),
            fmt_f64(s.std_error),
            s.n
        );
    }
    fs::write(path, out).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Parse a `checkpoints.csv` produced by [`write_checkpoints_csv`].
pub fn read_checkpoints_csv(path: &Path) -> Result<Vec<(f64, f64, f64, usize)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(CliError::Schema(format!(
                "{}:{}: expected at least 3 comma-separated fields",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64, CliError> {
            s.parse::<f64>().map_err(|_| {
                CliError::Schema(format!(
                    "{}:{}: cannot parse {what} from \"{s}\"",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        let t = parse(fields[0], "t")?;
        let mean = parse(fields[1], "mean_regret")?;
        let stderr = parse(fields[2], "std_error")?;
        let n = fields
            .get(3)
            .and_then(|s| s.parse::<usize>().ok())
            .unwrap_or(0);
        rows.push((t, mean, stderr, n));
    }
    if rows.is_empty() {
        return Err(CliError::Schema(format!(
            "{}: no checkpoint rows found",
            path.display()
        )));
    }
    Ok(rows)
}

/// Flag-gated per-run noise log.
pub fn write_noise_csv(path: &Path, output: &RunOutput) -> Result<(), CliError> {
    let Some(noise) = &output.noise else {
        return Ok(());
    };
    let n = noise.first().map_or(0, |w| w.len());
    let mut out = String::from("# columns: t");
    for i in 1..=n {
        let _ = write!(out, ", w{i}");
    }
    out.push('\n');
    for (t, w) in noise.iter().enumerate() {
        let _ = write!(out, "{}", t + 1);
        for v in w.iter() {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Flag-gated per-run state/control trajectory.
pub fn write_trajectory_csv(path: &Path, output: &RunOutput) -> Result<(), CliError> {
    let n = output.states.first().map_or(0, |x| x.len());
    let m = output.controls.first().map_or(0, |u| u.len());
    let mut out = String::from("# columns: t");
    for i in 1..=n {
        let _ = write!(out, ", x{i}");
    }
    for i in 1..=m {
        let _ = write!(out, ", u{i}");
    }
    out.push_str(", step_cost\n");
    for t in 0..output.controls.len() {
        let _ = write!(out, "{}", t + 1);
        for v in output.states[t].iter() {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        for v in output.controls[t].iter() {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        let _ = writeln!(out, ",{}", fmt_f64(output.step_costs[t]));
    }
    fs::write(path, out).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Flag-gated final posterior snapshot.
pub fn write_posterior_json(path: &Path, output: &RunOutput) -> Result<(), CliError> {
    let snap = output.final_posterior.snapshot();
    let text = serde_json::to_string_pretty(&snap)
        .map_err(|e| CliError::Io(format!("posterior snapshot: {e}")))?;
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// `(log10 T, log10 regret)` pairs with the fitted line and a square-root
/// reference anchored at the last checkpoint. With fewer than three positive
/// checkpoints the fit columns are omitted with a notice.
pub fn write_plotdata_csv(
    path: &Path,
    rows: &[(f64, f64, f64, usize)],
    fit: Option<&tsde_core::regret::SlopeFit>,
) -> Result<(), CliError> {
    let positives: Vec<(f64, f64)> = rows
        .iter()
        .filter(|(t, y, _, _)| *t > 0.0 && *y > 0.0)
        .map(|(t, y, _, _)| (*t, *y))
        .collect();
    let anchor = positives.last().copied();
    let ln10 = std::f64::consts::LN_10;
    let mut out = String::new();
    match (fit, anchor) {
        (Some(f), Some((t_max, y_max))) => {
            out.push_str(
                "# columns: log10_t, log10_mean_regret, fit_log10_regret, sqrt_ref_log10_regret\n",
            );
            let _ = writeln!(
                out,
                "# fit: slope = {}, intercept(log10) = {}, r_squared = {}, skipped = {}",
                fmt_f64(f.slope),
                fmt_f64(f.intercept / ln10),
                fmt_f64(f.r_squared),
                f.skipped
            );
            let _ = writeln!(
                out,
                "# sqrt reference anchored at t = {t_max}: c = regret(t_max) / sqrt(t_max)"
            );
            let c = y_max / t_max.sqrt();
            for (t, y) in &positives {
                let lt = t.log10();
                let fit_y = f.slope * lt + f.intercept / ln10;
                let ref_y = c.log10() + 0.5 * lt;
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    fmt_f64(lt),
                    fmt_f64(y.log10()),
                    fmt_f64(fit_y),
                    fmt_f64(ref_y)
                );
            }
        }
        _ => {
            out.push_str("# columns: log10_t, log10_mean_regret\n");
            out.push_str("# fit omitted: fewer than 3 positive checkpoints\n");
            for (t, y) in &positives {
                let _ = writeln!(out, "{},{}", fmt_f64(t.log10()), fmt_f64(y.log10()));
            }
        }
    }
    fs::write(path, out).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Human-readable run summary; the one artifact allowed a timestamp.
pub fn summary_text(
    report: &AggregateReport,
    certificate_line: &str,
    resolved_t_min: i64,
    master_seed: u64,
    unix_time: u64,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "experiment summary");
    let _ = writeln!(out, "==================");
    let _ = writeln!(out, "generated_unix: {unix_time}");
    let _ = writeln!(out, "rng: {}", tsde_core::RNG_DESCRIPTOR);
    let _ = writeln!(out, "master_seed: {master_seed}");
    let _ = writeln!(out, "resolved_t_min: {resolved_t_min}");
    let _ = writeln!(out, "certificate: {certificate_line}");
    let _ = writeln!(
        out,
        "runs: {} completed, {} failed{}",
        report.records.len(),
        report.failures,
        report
            .first_failure
            .as_deref()
            .map(|e| format!(" (first failure: {e})"))
            .unwrap_or_default()
    );
    let _ = writeln!(out, "\ncheckpoint mean regret (t, mean, stderr, n):");
    for s in &report.checkpoint_stats {
        let _ = writeln!(
            out,
            "  {:>8}  {:>14.6}  {:>12.6}  {:>5}",
            s.t, s.mean_regret, s.std_error, s.n
        );
    }
    match &report.slope {
        Some(f) => {
            let _ = writeln!(
                out,
                "\nlog-log fit: slope = {:.4}, intercept = {:.4}, r^2 = {:.4}, skipped = {}",
                f.slope, f.intercept, f.r_squared, f.skipped
            );
        }
        None => {
            let _ = writeln!(out, "\nlog-log fit: unavailable (fewer than 3 positive checkpoints)");
        }
    }
    let _ = writeln!(out, "\nregret decomposition means:");
    let _ = writeln!(
        out,
        "  r0 = {:.6}, r1 = {:.6}, r2 = {:.6}, bellman residual = {:.6}",
        report.mean_r0, report.mean_r1, report.mean_r2, report.mean_bellman_residual
    );
    let _ = writeln!(out, "\ndiagnostic pass rates:");
    let _ = writeln!(
        out,
        "  episode length law:   {:.4}",
        report.episode_length_law_rate
    );
    let _ = writeln!(out, "  determinant ratios:   {:.4}", report.det_ratio_rate);
    let _ = writeln!(
        out,
        "  episode count bound:  {:.4}",
        report.episode_count_bound_rate
    );
    match report.state_bound_rate {
        Some(rate) => {
            let _ = writeln!(out, "  state norm bound:     {rate:.4}");
        }
        None => {
            let _ = writeln!(out, "  state norm bound:     n/a (no certificate)");
        }
    }
    let _ = writeln!(
        out,
        "  runs with projection fallback: {}",
        report.runs_with_fallback
    );
    out
}
