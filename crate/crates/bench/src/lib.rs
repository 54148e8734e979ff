//! Shared fixtures for the criterion benchmarks.

use tsde_core::lqr::CostMatrices;
use tsde_core::nalgebra::DMatrix;
use tsde_core::posterior::{PosteriorState, SupportSet};
use tsde_core::tsde::RunConfig;

/// Scalar benchmark family used across the benchmarks: a box straddling the
/// unstable boundary with unit costs and unit noise.
pub fn scalar_run_config(horizon: i64, t_min: i64) -> RunConfig {
    let center = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
    RunConfig {
        horizon,
        t_min,
        sigma_w2: 1.0,
        cost: CostMatrices::identity(1, 1),
        support: SupportSet::box_uniform(center.clone(), 0.25).expect("valid box"),
        prior: PosteriorState::new(center, DMatrix::identity(2, 2), 1.0).expect("valid prior"),
        record_noise: false,
    }
}

/// A stabilizable four-state pair for the Riccati benchmarks.
pub fn four_state_system() -> (tsde_core::SystemParams, CostMatrices) {
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            0.9, 0.2, 0.0, 0.1, //
            0.0, 0.8, 0.1, 0.0, //
            0.1, 0.0, 1.05, 0.3, //
            0.0, 0.0, 0.0, 0.7,
        ],
    );
    let b = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 0.5, 0.3, 1.0, 0.0, 0.2]);
    (
        tsde_core::SystemParams::new(a, b).expect("valid system"),
        CostMatrices::identity(4, 2),
    )
}
