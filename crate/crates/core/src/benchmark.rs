//! The two-vertex reference problem used by the checks and the default
//! configuration.

use crate::control::{CostFamily, CostSpec};
use crate::dynamics::SdeConfig;
use crate::energy::{EnergySpec, EnergyVariant};
use crate::error::Result;
use crate::graph::{DensityState, Graph, MomentumState};
use crate::hjb::SimplexGrid;
use crate::weight::ProbabilityWeight;

pub const ELL: f64 = 1.0;
pub const HORIZON: f64 = 0.25;
pub const MID_TIME: f64 = 0.125;
pub const DT: f64 = 1.0 / 256.0;
pub const SIGMA: f64 = 0.3;
pub const GRID_MARGIN: f64 = 0.2;
pub const GRID_X: f64 = 1.0;
pub const GRID_STEPS: usize = 64;

pub fn energy() -> EnergySpec {
    EnergySpec::new(
        Graph::two_node(1.0).expect("two-vertex graph is valid"),
        ProbabilityWeight::average(),
        EnergyVariant::PolynomialInteraction,
    )
    .with_sigma(vec![SIGMA, SIGMA])
    .expect("sigma has the right length")
}

pub fn cost() -> CostSpec {
    let g = Graph::two_node(1.0).expect("two-vertex graph is valid");
    CostSpec::new(CostFamily::BoundedTracking, &g, 0.5)
        .and_then(|c| c.with_tracking(vec![0.5, 0.5], vec![0.0, 0.0], 4.0, 1.0))
        .and_then(|c| c.with_bound(1.0))
        .and_then(|c| c.with_weights(1.0, 1.0))
        .expect("benchmark cost is valid")
}

pub fn sde_config() -> Result<SdeConfig> {
    SdeConfig::new(energy(), 0.0, HORIZON, DT)
}

pub fn grid(points: usize) -> Result<SimplexGrid> {
    SimplexGrid::new(GRID_MARGIN, points, GRID_X, points, HORIZON, GRID_STEPS)
}

/// Reference initial state; `D_xℋ₀ ≠ 0` there so the noise moves the energy.
pub fn initial_state() -> (DensityState, MomentumState) {
    (
        DensityState::new(vec![0.4, 0.6]).expect("valid density"),
        MomentumState::new(vec![0.5, 0.0]).expect("finite momentum"),
    )
}
