//! Deterministic fixed-timestep simulator for the shelf-picking robot.
//!
//! Each tick filters the operator's hand positions, solves the shared
//! control problem, realizes the first waypoint through an identity inner
//! loop, resolves joint angles, drives the base, and checks grasps.

pub mod benchmark;
pub mod engine;
pub mod metrics;
pub mod operator;
pub mod record;
pub mod scan;
pub mod scenario;

pub use engine::{RunOutput, SimError, Simulation};
pub use metrics::RunMetrics;
pub use record::TickRecord;
pub use scenario::{Scenario, ScenarioError};
