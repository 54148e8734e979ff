//! Adaptive control of an unknown linear-quadratic system by posterior
//! sampling with dynamic episodes, plus the numerical machinery around it:
//!
//! - [`lqr`]: Riccati fixed point, optimal gain, and average cost for a known
//!   parameter.
//! - [`posterior`]: recursive Bayesian regression over the stacked dynamics
//!   parameters, truncated to a compact support set.
//! - [`stability`]: sampled certification of the support (closed-loop
//!   spectral radii, transient growth constant, minimum episode length).
//! - [`sim`]: the ground-truth environment with seeded Gaussian noise.
//! - [`tsde`]: the episodic control loop itself.
//! - [`regret`]: Monte Carlo regret estimation, the pathwise regret
//!   decomposition, and per-run diagnostic bounds.

pub use nalgebra;

pub mod lqr;
pub mod posterior;
pub mod regret;
pub mod sim;
pub mod stability;
pub mod tsde;

pub use lqr::{CostMatrices, LqrError, RiccatiSolution, SystemParams};
pub use posterior::{PosteriorError, PosteriorSnapshot, PosteriorState, Regressor, SupportSet};
pub use regret::{AggregateReport, CheckpointStat, McConfig, McError, RunRecord, SlopeFit};
pub use sim::{EnvState, SimError, RNG_DESCRIPTOR};
pub use stability::{RadiusCheck, StabilityCertificate, StabilityError};
pub use tsde::{EpisodeRecord, EpisodeState, RunConfig, RunError, RunOutput, Trigger};
