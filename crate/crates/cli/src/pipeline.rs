//! Experiment orchestration: certification, the Monte Carlo run, and the
//! plot-data conversion.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use tsde_core::regret::{self, McConfig};
use tsde_core::stability::{self, StabilityCertificate, StabilityError};

use crate::config::{ExperimentConfig, TMin};
use crate::output;
use crate::CliError;

/// Certification outcome serialized as the experiment header. The estimate
/// is sampled, not a proof over the whole support; the header says so.
#[derive(Debug, Serialize)]
pub struct CertificateHeader {
    pub status: &'static str,
    pub kind: &'static str,
    pub delta: Option<f64>,
    pub epsilon: Option<f64>,
    pub alpha: Option<f64>,
    pub t_min_star: Option<usize>,
    pub pairs_checked: usize,
    pub max_rho_observed: f64,
    pub max_norm_observed: f64,
    pub dare_failures: usize,
    pub resolved_t_min: Option<i64>,
    pub rng: &'static str,
}

impl CertificateHeader {
    fn certified(cert: &StabilityCertificate, resolved_t_min: Option<i64>) -> Self {
        Self {
            status: "certified",
            kind: "sampled",
            delta: Some(cert.delta),
            epsilon: Some(cert.epsilon),
            alpha: Some(cert.alpha),
            t_min_star: Some(cert.t_min_star),
            pairs_checked: cert.pairs_checked,
            max_rho_observed: cert.max_rho_observed,
            max_norm_observed: cert.max_norm_observed,
            dare_failures: 0,
            resolved_t_min,
            rng: tsde_core::RNG_DESCRIPTOR,
        }
    }

    fn uncertified(
        max_rho: f64,
        dare_failures: usize,
        pairs_checked: usize,
        resolved_t_min: Option<i64>,
    ) -> Self {
        Self {
            status: "uncertified",
            kind: "sampled",
            delta: None,
            epsilon: None,
            alpha: None,
            t_min_star: None,
            pairs_checked,
            max_rho_observed: max_rho,
            max_norm_observed: f64::NAN,
            dare_failures,
            resolved_t_min,
            rng: tsde_core::RNG_DESCRIPTOR,
        }
    }

    pub fn one_line(&self) -> String {
        match self.status {
            "certified" => format!(
                "certified (sampled): delta = {:.6}, epsilon = {:.6}, alpha = {:.4}, \
                 t_min_star = {}, pairs = {}",
                self.delta.unwrap_or(f64::NAN),
                self.epsilon.unwrap_or(f64::NAN),
                self.alpha.unwrap_or(f64::NAN),
                self.t_min_star.unwrap_or(0),
                self.pairs_checked
            ),
            _ => format!(
                "UNCERTIFIED: max rho = {:.6}, gain solve failures = {}, pairs = {}",
                self.max_rho_observed, self.dare_failures, self.pairs_checked
            ),
        }
    }
}

fn write_certificate(dir: &Path, header: &CertificateHeader) -> Result<(), CliError> {
    let path = dir.join("certificate.json");
    let text = serde_json::to_string_pretty(header)
        .map_err(|e| CliError::Io(format!("certificate: {e}")))?;
    fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn certify(cfg: &ExperimentConfig) -> Result<StabilityCertificate, CliError> {
    stability::certify(
        &cfg.support,
        &cfg.cost,
        cfg.epsilon,
        cfg.cert_samples,
        cfg.cert_horizon,
        cfg.cert_seed,
    )
    .map_err(|e| match e {
        StabilityError::RadiusBoundViolated {
            max_rho,
            dare_failures,
            pairs_checked,
        } => CliError::Certification {
            max_rho,
            dare_failures,
            pairs_checked,
        },
        other => CliError::Run(format!("certification failed: {other}")),
    })
}

/// `certify` subcommand: emit the certificate header and nothing else.
pub fn certify_only(cfg: &ExperimentConfig) -> Result<CertificateHeader, CliError> {
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", cfg.output_dir.display())))?;
    match certify(cfg) {
        Ok(cert) => {
            let resolved = resolve_t_min(cfg, Some(&cert))?;
            let header = CertificateHeader::certified(&cert, Some(resolved));
            write_certificate(&cfg.output_dir, &header)?;
            Ok(header)
        }
        Err(CliError::Certification {
            max_rho,
            dare_failures,
            pairs_checked,
        }) => {
            let header =
                CertificateHeader::uncertified(max_rho, dare_failures, pairs_checked, None);
            write_certificate(&cfg.output_dir, &header)?;
            Err(CliError::Certification {
                max_rho,
                dare_failures,
                pairs_checked,
            })
        }
        Err(e) => Err(e),
    }
}

fn resolve_t_min(
    cfg: &ExperimentConfig,
    cert: Option<&StabilityCertificate>,
) -> Result<i64, CliError> {
    match (cfg.t_min, cert) {
        (TMin::Fixed(v), _) => Ok(v),
        (TMin::Auto, Some(c)) => Ok(c.t_min_star as i64),
        (TMin::Auto, None) => Err(CliError::Schema(
            "t_min = \"auto\" needs a successful certification; set an explicit t_min \
             to run on an uncertified support"
                .into(),
        )),
    }
}

pub struct ExperimentArtifacts {
    pub output_dir: PathBuf,
    pub certified: bool,
    pub resolved_t_min: i64,
    pub slope: Option<tsde_core::regret::SlopeFit>,
}

/// `run` subcommand: certification header, Monte Carlo runs, CSV artifacts,
/// and the summary. Deterministic outputs given `(config, master_seed)`;
/// only `summary.txt` carries a timestamp.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentArtifacts, CliError> {
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", cfg.output_dir.display())))?;

    let cert = match certify(cfg) {
        Ok(cert) => Some(cert),
        Err(CliError::Certification {
            max_rho,
            dare_failures,
            pairs_checked,
        }) => {
            if !cfg.flags.allow_uncertified_support {
                let header =
                    CertificateHeader::uncertified(max_rho, dare_failures, pairs_checked, None);
                write_certificate(&cfg.output_dir, &header)?;
                return Err(CliError::Certification {
                    max_rho,
                    dare_failures,
                    pairs_checked,
                });
            }
            eprintln!(
                "warning: support failed certification (max rho = {max_rho:.6}); \
                 continuing because allow_uncertified_support is set"
            );
            None
        }
        Err(e) => return Err(e),
    };

    let resolved_t_min = resolve_t_min(cfg, cert.as_ref())?;
    let header = match &cert {
        Some(c) => CertificateHeader::certified(c, Some(resolved_t_min)),
        None => CertificateHeader::uncertified(f64::NAN, 0, 0, Some(resolved_t_min)),
    };
    write_certificate(&cfg.output_dir, &header)?;

    if cfg.n_runs == 0 {
        // Certification-only mode.
        return Ok(ExperimentArtifacts {
            output_dir: cfg.output_dir.clone(),
            certified: cert.is_some(),
            resolved_t_min,
            slope: None,
        });
    }

    let mc = McConfig {
        horizon: cfg.horizon,
        t_min: resolved_t_min,
        sigma_w2: cfg.sigma_w2,
        cost: cfg.cost.clone(),
        support: cfg.support.clone(),
        prior: cfg.prior()?,
        n_runs: cfg.n_runs,
        master_seed: cfg.master_seed,
        checkpoints: cfg.checkpoints.clone(),
        record_noise: cfg.flags.persist_noise,
    };

    let noise_dir = cfg.output_dir.join("noise");
    let trajectory_dir = cfg.output_dir.join("trajectory");
    if cfg.flags.persist_noise {
        fs::create_dir_all(&noise_dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", noise_dir.display())))?;
    }
    if cfg.flags.persist_trajectory {
        fs::create_dir_all(&trajectory_dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", trajectory_dir.display())))?;
    }

    let persist_noise = cfg.flags.persist_noise;
    let persist_trajectory = cfg.flags.persist_trajectory;
    let report = run_in_worker_pool(|| {
        regret::run_monte_carlo_with(&mc, cert.as_ref(), |i, out, _rec| {
            if persist_noise {
                let _ = output::write_noise_csv(&noise_dir.join(format!("run_{i:04}.csv")), out);
            }
            if persist_trajectory {
                let _ = output::write_trajectory_csv(
                    &trajectory_dir.join(format!("run_{i:04}.csv")),
                    out,
                );
                let _ = output::write_posterior_json(
                    &trajectory_dir.join(format!("run_{i:04}_posterior.json")),
                    out,
                );
            }
        })
    })
    .map_err(|e| CliError::Run(e.to_string()))?;

    output::write_runs_csv(&cfg.output_dir.join("runs.csv"), &report)?;
    output::write_checkpoints_csv(&cfg.output_dir.join("checkpoints.csv"), &report)?;
    let unix_time = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let summary = output::summary_text(
        &report,
        &header.one_line(),
        resolved_t_min,
        cfg.master_seed,
        unix_time,
    );
    let summary_path = cfg.output_dir.join("summary.txt");
    fs::write(&summary_path, summary)
        .map_err(|e| CliError::Io(format!("{}: {e}", summary_path.display())))?;

    Ok(ExperimentArtifacts {
        output_dir: cfg.output_dir.clone(),
        certified: cert.is_some(),
        resolved_t_min,
        slope: report.slope,
    })
}

/// Honor `TSDE_WORKERS` for the Monte Carlo worker pool; the aggregate is
/// scheduling-independent either way.
fn run_in_worker_pool<T>(f: impl FnOnce() -> T + Send) -> T
where
    T: Send,
{
    match std::env::var("TSDE_WORKERS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|k| *k > 0)
    {
        Some(workers) => match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

/// `plotdata` subcommand.
pub fn emit_plot_data(checkpoints: &Path, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let rows = output::read_checkpoints_csv(checkpoints)?;
    let points: Vec<(f64, f64)> = rows.iter().map(|(t, y, _, _)| (*t, *y)).collect();
    let fit = regret::fit_slope(&points).ok();
    if fit.is_none() {
        eprintln!(
            "notice: fit omitted ({} usable checkpoint(s); at least 3 positive ones are needed)",
            points.iter().filter(|(t, y)| *t > 0.0 && *y > 0.0).count()
        );
    }
    let out_path = out.map(Path::to_path_buf).unwrap_or_else(|| {
        checkpoints
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("plotdata.csv")
    });
    output::write_plotdata_csv(&out_path, &rows, fit.as_ref())?;
    Ok(out_path)
}
