//! Run metrics, computed from tick records alone so the log can reproduce them.

use serde::{Deserialize, Serialize};

use crate::record::TickRecord;

/// Violation above which a tick counts as a collision.
pub const COLLISION_TOLERANCE: f64 = 1e-4;
/// Arbitration weight at or above which the robot should be tracking.
pub const FAR_FIELD_WEIGHT: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub ticks: u64,
    pub completion_time: Option<f64>,
    /// Per arm: distance to its goal when it grasped, or at the end of the
    /// run if it never did.
    pub terminal_goal_error: [Option<f64>; 2],
    pub min_clearance: Option<f64>,
    pub inter_effector_distance: Vec<f64>,
    pub tracking_error: Vec<[f64; 2]>,
    pub collisions: u64,
    pub solver_failures: u64,
    pub ik_failures: u64,
    /// RMS tracking error over arm-ticks whose planned horizon stays at
    /// weight [`FAR_FIELD_WEIGHT`] or above.
    pub far_field_rms: Option<f64>,
    pub far_field_max: Option<f64>,
    /// Spread (max - min) of the inter-effector distance while coupled.
    pub coupled_distance_variation: Option<f64>,
}

impl RunMetrics {
    pub fn completed(&self) -> bool {
        self.completion_time.is_some()
    }
}

#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    ticks: u64,
    completion_time: Option<f64>,
    terminal: [Option<f64>; 2],
    terminal_locked: [bool; 2],
    min_clearance: Option<f64>,
    inter: Vec<f64>,
    tracking: Vec<[f64; 2]>,
    collisions: u64,
    solver_failures: u64,
    ik_failures: u64,
    far_sq: f64,
    far_n: u64,
    far_max: Option<f64>,
    coupled_range: Option<(f64, f64)>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: &TickRecord) {
        self.ticks += 1;
        if r.complete && self.completion_time.is_none() {
            self.completion_time = Some(r.time);
        }
        for arm in 0..2 {
            if !self.terminal_locked[arm] {
                if let Some(d) = r.goal_distance[arm] {
                    self.terminal[arm] = Some(d);
                }
                if r.attached[arm].is_some() {
                    self.terminal_locked[arm] = true;
                }
            }
            if r.horizon_k_min[arm] >= FAR_FIELD_WEIGHT {
                let e = r.tracking_error[arm];
                self.far_sq += e * e;
                self.far_n += 1;
                self.far_max = Some(self.far_max.map_or(e, |m: f64| m.max(e)));
            }
            self.ik_failures += u64::from(r.ik_failed[arm]);
        }
        if let Some(c) = r.min_clearance {
            self.min_clearance = Some(self.min_clearance.map_or(c, |m: f64| m.min(c)));
        }
        self.inter.push(r.inter_effector);
        self.tracking.push(r.tracking_error);
        self.collisions += u64::from(r.violation > COLLISION_TOLERANCE);
        self.solver_failures += u64::from(r.solver.failed);
        if r.coupled {
            let d = r.inter_effector;
            self.coupled_range = Some(self.coupled_range.map_or((d, d), |(lo, hi)| (lo.min(d), hi.max(d))));
        }
    }

    pub fn finish(self) -> RunMetrics {
        RunMetrics {
            ticks: self.ticks,
            completion_time: self.completion_time,
            terminal_goal_error: self.terminal,
            min_clearance: self.min_clearance,
            inter_effector_distance: self.inter,
            tracking_error: self.tracking,
            collisions: self.collisions,
            solver_failures: self.solver_failures,
            ik_failures: self.ik_failures,
            far_field_rms: (self.far_n > 0).then(|| (self.far_sq / self.far_n as f64).sqrt()),
            far_field_max: self.far_max,
            coupled_distance_variation: self.coupled_range.map(|(lo, hi)| hi - lo),
        }
    }
}

pub fn compute(records: &[TickRecord]) -> RunMetrics {
    let mut acc = MetricsAccumulator::new();
    for r in records {
        acc.push(r);
    }
    acc.finish()
}
