use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tsde_cli::config::{self, AutoOr, TMin};
use tsde_cli::{pipeline, CliError};

#[derive(Parser)]
#[command(
    name = "tsde",
    about = "Adaptive LQ control experiments: posterior sampling with dynamic episodes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Command-line values override the matching config-file fields.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Number of Monte Carlo runs.
    #[arg(long)]
    n_runs: Option<usize>,
    /// Master seed for all run streams.
    #[arg(long)]
    master_seed: Option<u64>,
    /// Horizon T.
    #[arg(long)]
    horizon: Option<i64>,
    /// Minimum episode length, or "auto".
    #[arg(long)]
    t_min: Option<String>,
    /// Stability margin epsilon, or "auto".
    #[arg(long)]
    epsilon: Option<String>,
    /// Noise variance.
    #[arg(long)]
    sigma_w2: Option<f64>,
    /// Artifact directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Persist per-run noise logs.
    #[arg(long)]
    persist_noise: bool,
    /// Persist per-run trajectories and final posteriors.
    #[arg(long)]
    persist_trajectory: bool,
    /// Run even if the support fails certification (needs explicit t_min).
    #[arg(long)]
    allow_uncertified_support: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Certify a support set and emit certificate.json.
    Certify {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Certify, run the Monte Carlo experiment, and write all artifacts.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Convert a checkpoints.csv into log-log plot data.
    Plotdata {
        checkpoints: PathBuf,
        /// Output file (default: plotdata.csv next to the input).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn apply_overrides(
    cfg: &mut config::ExperimentConfig,
    ov: &Overrides,
) -> Result<(), CliError> {
    if let Some(v) = ov.n_runs {
        cfg.n_runs = v;
    }
    if let Some(v) = ov.master_seed {
        cfg.master_seed = v;
    }
    if let Some(v) = ov.horizon {
        if v < 1 {
            return Err(CliError::field("horizon", "must be at least 1".into()));
        }
        cfg.horizon = v;
        cfg.checkpoints = tsde_core::regret::McConfig::default_checkpoints(v);
    }
    if let Some(s) = &ov.t_min {
        cfg.t_min = if s == "auto" {
            TMin::Auto
        } else {
            let v: i64 = s
                .parse()
                .map_err(|_| CliError::field("t_min", format!("expected integer or \"auto\", got \"{s}\"")))?;
            if v < 0 {
                return Err(CliError::field("t_min", "must be nonnegative".into()));
            }
            TMin::Fixed(v)
        };
    }
    if let Some(s) = &ov.epsilon {
        let parsed: AutoOr<f64> = if s == "auto" {
            AutoOr::Keyword("auto".into())
        } else {
            AutoOr::Value(s.parse().map_err(|_| {
                CliError::field("epsilon", format!("expected number or \"auto\", got \"{s}\""))
            })?)
        };
        cfg.epsilon = match parsed {
            AutoOr::Keyword(_) => None,
            AutoOr::Value(v) if v > 0.0 && v < 1.0 => Some(v),
            AutoOr::Value(v) => {
                return Err(CliError::field(
                    "epsilon",
                    format!("must lie in (0, 1), got {v}"),
                ));
            }
        };
    }
    if let Some(v) = ov.sigma_w2 {
        if !v.is_finite() || v < 0.0 {
            return Err(CliError::field("sigma_w2", "must be finite and nonnegative".into()));
        }
        cfg.sigma_w2 = v;
    }
    if let Some(dir) = &ov.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.flags.persist_noise |= ov.persist_noise;
    cfg.flags.persist_trajectory |= ov.persist_trajectory;
    cfg.flags.allow_uncertified_support |= ov.allow_uncertified_support;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Certify { config, overrides } => {
            let mut cfg = config::parse_config(&config)?;
            apply_overrides(&mut cfg, &overrides)?;
            let header = pipeline::certify_only(&cfg)?;
            println!("{}", header.one_line());
            println!(
                "wrote {}",
                cfg.output_dir.join("certificate.json").display()
            );
            Ok(())
        }
        Command::Run { config, overrides } => {
            let mut cfg = config::parse_config(&config)?;
            apply_overrides(&mut cfg, &overrides)?;
            let artifacts = pipeline::run_experiment(&cfg)?;
            if cfg.n_runs == 0 {
                println!(
                    "certification-only mode: wrote {}",
                    artifacts.output_dir.join("certificate.json").display()
                );
            } else {
                println!("artifacts in {}", artifacts.output_dir.display());
                if let Some(fit) = artifacts.slope {
                    println!(
                        "log-log slope = {:.4} (r^2 = {:.4})",
                        fit.slope, fit.r_squared
                    );
                }
            }
            Ok(())
        }
        Command::Plotdata { checkpoints, out } => {
            let path = pipeline::emit_plot_data(&checkpoints, out.as_deref())?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successes; everything else is usage (1).
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
