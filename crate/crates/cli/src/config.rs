//! Experiment configuration: a single TOML file with nested sections,
//! matrices as nested row-major arrays, and `"auto"` placeholders resolved
//! against the stability certificate before any run starts.

use std::path::{Path, PathBuf};

use tsde_core::nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use tsde_core::lqr::CostMatrices;
use tsde_core::posterior::{PosteriorState, SupportSet};

use crate::CliError;

/// An integer or float field that may also be the string `"auto"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoOr<T> {
    Value(T),
    Keyword(String),
}

impl<T: Copy> AutoOr<T> {
    fn resolve(&self, field: &str) -> Result<Option<T>, CliError> {
        match self {
            AutoOr::Value(v) => Ok(Some(*v)),
            AutoOr::Keyword(s) if s == "auto" => Ok(None),
            AutoOr::Keyword(s) => Err(CliError::field(
                field,
                format!("expected a number or \"auto\", got \"{s}\""),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCost {
    #[serde(alias = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(alias = "R")]
    pub r: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPrior {
    pub mean: Vec<Vec<f64>>,
    #[serde(alias = "Sigma1")]
    pub sigma1: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawHalfwidth {
    Uniform(f64),
    PerEntry(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSupport {
    /// `"box"` or `"ball"`.
    pub kind: String,
    pub center: Vec<Vec<f64>>,
    pub halfwidth: Option<RawHalfwidth>,
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RawCertification {
    /// Support members sampled per pair pool (corners are always added for
    /// small boxes).
    pub n_samples: usize,
    /// Power horizon; 0 means automatic.
    pub horizon: usize,
    /// Certification stream seed; defaults to the master seed.
    pub seed: Option<u64>,
}

impl Default for RawCertification {
    fn default() -> Self {
        Self {
            n_samples: 64,
            horizon: 0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RawFlags {
    pub persist_noise: bool,
    pub persist_trajectory: bool,
    pub allow_uncertified_support: bool,
}

/// The experiment file exactly as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub n: usize,
    pub m: usize,
    pub sigma_w2: f64,
    #[serde(alias = "T")]
    pub horizon: i64,
    pub t_min: AutoOr<i64>,
    pub epsilon: Option<AutoOr<f64>>,
    pub n_runs: usize,
    pub master_seed: u64,
    pub checkpoints: Option<Vec<i64>>,
    pub output_dir: Option<PathBuf>,
    pub cost: RawCost,
    pub prior: RawPrior,
    pub support: RawSupport,
    #[serde(default)]
    pub certification: RawCertification,
    #[serde(default)]
    pub flags: RawFlags,
}

/// The minimum episode length before certificate resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TMin {
    Auto,
    Fixed(i64),
}

/// Fully validated configuration with core types materialized.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub n: usize,
    pub m: usize,
    pub sigma_w2: f64,
    pub horizon: i64,
    pub t_min: TMin,
    /// `None` means choose the midpoint `(1 - delta) / 2` at certification.
    pub epsilon: Option<f64>,
    pub n_runs: usize,
    pub master_seed: u64,
    pub checkpoints: Vec<i64>,
    pub output_dir: PathBuf,
    pub cost: CostMatrices,
    pub support: SupportSet,
    pub prior_mean: DMatrix<f64>,
    pub prior_sigma: DMatrix<f64>,
    pub cert_samples: usize,
    pub cert_horizon: Option<usize>,
    pub cert_seed: u64,
    pub flags: RawFlags,
}

impl ExperimentConfig {
    pub fn prior(&self) -> Result<PosteriorState, CliError> {
        PosteriorState::new(
            self.prior_mean.clone(),
            self.prior_sigma.clone(),
            self.sigma_w2,
        )
        .map_err(|e| CliError::field("prior", e.to_string()))
    }
}

fn matrix_from_rows(
    rows: &[Vec<f64>],
    expect: (usize, usize),
    field: &str,
) -> Result<DMatrix<f64>, CliError> {
    let (nr, nc) = expect;
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        return Err(CliError::field(
            field,
            format!("expected a {nr}x{nc} row-major matrix"),
        ));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CliError::field(field, "entries must be finite".into()));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// Read and fully validate an experiment file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let raw: RawConfig = toml::from_str(&text)
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    resolve_config(raw)
}

/// Validate a raw configuration and materialize the core types.
pub fn resolve_config(raw: RawConfig) -> Result<ExperimentConfig, CliError> {
    if raw.n == 0 || raw.m == 0 {
        return Err(CliError::field("n/m", "dimensions must be positive".into()));
    }
    let (n, m) = (raw.n, raw.m);
    let d = n + m;
    if raw.horizon < 1 {
        return Err(CliError::field("horizon", "must be at least 1".into()));
    }
    if !raw.sigma_w2.is_finite() || raw.sigma_w2 < 0.0 {
        return Err(CliError::field("sigma_w2", "must be finite and nonnegative".into()));
    }

    let q = matrix_from_rows(&raw.cost.q, (n, n), "cost.q")?;
    let r = matrix_from_rows(&raw.cost.r, (m, m), "cost.r")?;
    let cost = CostMatrices::new(q, r).map_err(|e| CliError::field("cost", e.to_string()))?;

    let prior_mean = matrix_from_rows(&raw.prior.mean, (d, n), "prior.mean")?;
    let prior_sigma = matrix_from_rows(&raw.prior.sigma1, (d, d), "prior.sigma1")?;
    // Fail early with the field name if Sigma1 is not positive definite.
    PosteriorState::new(prior_mean.clone(), prior_sigma.clone(), raw.sigma_w2.max(1e-300))
        .map_err(|e| CliError::field("prior.sigma1", e.to_string()))?;

    let center = matrix_from_rows(&raw.support.center, (d, n), "support.center")?;
    let support = match raw.support.kind.as_str() {
        "box" => {
            let hw = raw.support.halfwidth.as_ref().ok_or_else(|| {
                CliError::field("support.halfwidth", "required for kind = \"box\"".into())
            })?;
            if raw.support.radius.is_some() {
                return Err(CliError::field(
                    "support.radius",
                    "not allowed for kind = \"box\"".into(),
                ));
            }
            match hw {
                RawHalfwidth::Uniform(h) => {
                    if !h.is_finite() || *h < 0.0 {
                        return Err(CliError::field(
                            "support.halfwidth",
                            "must be finite and nonnegative (zero = single point)".into(),
                        ));
                    }
                    SupportSet::box_uniform(center, *h)
                }
                RawHalfwidth::PerEntry(rows) => {
                    let hmat = matrix_from_rows(rows, (d, n), "support.halfwidth")?;
                    if hmat.iter().any(|h| h.is_nan() || *h < 0.0) {
                        return Err(CliError::field(
                            "support.halfwidth",
                            "entries must be nonnegative".into(),
                        ));
                    }
                    SupportSet::box_per_entry(center, hmat)
                }
            }
        }
        "ball" => {
            let radius = raw.support.radius.ok_or_else(|| {
                CliError::field("support.radius", "required for kind = \"ball\"".into())
            })?;
            if raw.support.halfwidth.is_some() {
                return Err(CliError::field(
                    "support.halfwidth",
                    "not allowed for kind = \"ball\"".into(),
                ));
            }
            if !radius.is_finite() || radius < 0.0 {
                return Err(CliError::field(
                    "support.radius",
                    "must be finite and nonnegative (zero = single point)".into(),
                ));
            }
            SupportSet::ball(center, radius)
        }
        other => {
            return Err(CliError::field(
                "support.kind",
                format!("expected \"box\" or \"ball\", got \"{other}\""),
            ));
        }
    }
    .map_err(|e| CliError::field("support", e.to_string()))?;

    let t_min = match raw.t_min.resolve("t_min")? {
        Some(v) if v < 0 => {
            return Err(CliError::field("t_min", "must be nonnegative".into()));
        }
        Some(v) => TMin::Fixed(v),
        None => TMin::Auto,
    };
    let epsilon = match &raw.epsilon {
        None => None,
        Some(e) => match e.resolve("epsilon")? {
            None => None,
            Some(v) if v > 0.0 && v < 1.0 => Some(v),
            Some(v) => {
                return Err(CliError::field(
                    "epsilon",
                    format!("must lie in (0, 1), got {v}"),
                ));
            }
        },
    };

    let checkpoints = match &raw.checkpoints {
        Some(c) => {
            let mut c = c.clone();
            c.sort_unstable();
            c.dedup();
            if c.iter().any(|t| *t < 1 || *t > raw.horizon) {
                return Err(CliError::field(
                    "checkpoints",
                    "every checkpoint must lie in [1, horizon]".into(),
                ));
            }
            c
        }
        None => tsde_core::regret::McConfig::default_checkpoints(raw.horizon),
    };

    if raw.certification.n_samples == 0 {
        return Err(CliError::field(
            "certification.n_samples",
            "must be positive".into(),
        ));
    }

    Ok(ExperimentConfig {
        n,
        m,
        sigma_w2: raw.sigma_w2,
        horizon: raw.horizon,
        t_min,
        epsilon,
        n_runs: raw.n_runs,
        master_seed: raw.master_seed,
        checkpoints,
        output_dir: raw
            .output_dir
            .unwrap_or_else(|| PathBuf::from("tsde-out")),
        cost,
        support,
        prior_mean,
        prior_sigma,
        cert_samples: raw.certification.n_samples,
        cert_horizon: (raw.certification.horizon > 0).then_some(raw.certification.horizon),
        cert_seed: raw.certification.seed.unwrap_or(raw.master_seed),
        flags: raw.flags,
    })
}
