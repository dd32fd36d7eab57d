//! Per-tick log records and their line-delimited JSON encoding.

use std::io::{self, BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use shelfbot_core::alilqr::SolveStatus;
use shelfbot_core::worldmodel::{Arm, GraspKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalWeightRecord {
    pub object_id: String,
    pub left: f64,
    pub right: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub object_id: String,
    /// World frame.
    pub position: [f64; 3],
    pub holders: Vec<Arm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverRecord {
    pub status: SolveStatus,
    /// The solve was not usable and the arms held position.
    pub failed: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub cost: f64,
    pub max_violation: f64,
}

/// Everything that happened on one tick. Positions are in the robot base
/// frame unless noted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub time: f64,
    pub commanded: [[f64; 3]; 2],
    /// Orientations sent to IK, row-major.
    pub orientation: [[f64; 9]; 2],
    /// Reference position one step ahead.
    pub reference: [[f64; 3]; 2],
    pub waypoint: [[f64; 3]; 2],
    pub realized: [[f64; 3]; 2],
    pub joints: [[f64; 6]; 2],
    /// World frame `[x, y, yaw]` after this tick.
    pub base_pose: [f64; 3],
    /// Commanded and gated base twist.
    pub base_command: [f64; 3],
    pub base_twist: [f64; 3],
    pub goal_weights: Vec<GoalWeightRecord>,
    /// Smallest arbitration weight per arm at the realized state.
    pub k_min: [f64; 2],
    /// Smallest weight per arm along the planned horizon, including the
    /// realized state.
    pub horizon_k_min: [f64; 2],
    /// Distance to the nearest goal the arm may grasp, before attachment.
    pub goal_distance: [Option<f64>; 2],
    pub tracking_error: [f64; 2],
    pub inter_effector: f64,
    /// Largest plane or ellipsoid violation at the realized state.
    pub violation: f64,
    pub min_clearance: Option<f64>,
    pub mode: GraspKind,
    pub coupled: bool,
    /// Objects grasped on this tick, per arm.
    pub attached: [Option<String>; 2],
    pub objects: Vec<ObjectRecord>,
    pub hold: bool,
    pub ik_failed: [bool; 2],
    pub solver: SolverRecord,
    pub complete: bool,
}

pub fn write_jsonl<W: Write>(writer: &mut W, records: &[TickRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *writer, r)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn to_jsonl(records: &[TickRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    write_jsonl(&mut out, records).expect("writing to memory cannot fail");
    out
}

pub fn read_jsonl<R: Read>(reader: R) -> io::Result<Vec<TickRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(reader).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}
