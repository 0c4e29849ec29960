//! Welfare-maximizing regulation allocation (WMRA) for an aggregator that
//! coordinates a dynamic EV fleet to deliver frequency regulation.
//!
//! Each slot the grid asks the aggregator to absorb or supply `G_t` kWh. The
//! allocator splits the request among the EVs that are plugged in and buys
//! whatever is left from external sources. It keeps three virtual queues per
//! EV so that, without any knowledge of the signal statistics, it
//!
//! - keeps every battery inside its preferred energy range,
//! - drives the long-run degradation cost under a per-EV cap, and
//! - stays within `B / V` of the best achievable long-run welfare.
//!
//! Modules:
//! - [`model`]: domain types and per-slot physics
//! - [`stochastic`]: seedable scenario generator
//! - [`queues`]: virtual queues and derived constants
//! - [`solvers`]: scalar and coupled convex solvers, grid oracle
//! - [`wmra`]: the allocator, the greedy baseline and the simulation loop
//! - [`metrics`]: welfare accounting and invariant monitors

pub mod error;
pub mod metrics;
pub mod model;
pub mod queues;
pub mod solvers;
pub mod stochastic;
pub mod wmra;

pub use error::{Result, WmraError};
pub use metrics::{theory_gap_report, MetricsSeries, RunSummary, SlotRecord};
pub use model::{
    Allocation, DegradationModel, EVParams, EVState, EvType, FleetSpec, SlotSignal, UtilityModel, FEASIBILITY_TOL,
};
pub use queues::{derive_constants, derive_constants_scaled, DerivedConstants};
pub use solvers::{oracle_grid, solve_aux, solve_coupled, CoupledItem, CoupledProblem, ItemCost};
pub use stochastic::{InitialEnergy, ScenarioConfig, ScenarioGenerator};
pub use wmra::{greedy_step, run_controller, wmra_step, ControllerKind, RunOptions, RunOutput, ViolationPolicy};
