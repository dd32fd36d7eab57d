//! Operator command sources: idle, recorded trace, reactive script, live bridge.

use std::io::{BufRead, BufReader, Read};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use shelfbot_bridge::{BridgeHandle, CommandMessage};
use shelfbot_core::worldmodel::{Arm, ArmPair, Goal, GraspKind, Rot3, Vec3};
use thiserror::Error;

use crate::scenario::ScriptSpec;

/// What the operator asks for on one tick, in the robot base frame.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorCommand {
    pub positions: ArmPair,
    pub orientations: [Rot3; 2],
    /// Gripper closed.
    pub grippers: [bool; 2],
    pub left_pad: (f64, f64),
    pub right_pad_x: f64,
    /// Live grasp-mode request; overrides the schedule.
    pub grasp_mode: Option<(GraspKind, Option<Vec3>)>,
    /// Commands are frozen for safety.
    pub hold: bool,
}

impl OperatorCommand {
    pub fn holding(positions: ArmPair, orientations: [Rot3; 2]) -> Self {
        Self {
            positions,
            orientations,
            grippers: [false; 2],
            left_pad: (0.0, 0.0),
            right_pad_x: 0.0,
            grasp_mode: None,
            hold: false,
        }
    }
}

/// What the operator can see of the robot.
#[derive(Clone, Debug)]
pub struct Observation<'a> {
    pub time: f64,
    pub effectors: ArmPair,
    pub holding: [bool; 2],
    /// All scenario goals, including ones already grasped.
    pub goals: &'a [Goal],
}

pub trait OperatorSource {
    fn command(&mut self, obs: &Observation<'_>) -> OperatorCommand;

    /// Time after which the source has nothing more to say.
    fn end_time(&self) -> Option<f64> {
        None
    }
}

/// Holds the initial command forever.
pub struct IdleOperator {
    command: OperatorCommand,
}

impl IdleOperator {
    pub fn new(initial: OperatorCommand) -> Self {
        Self { command: initial }
    }
}

impl OperatorSource for IdleOperator {
    fn command(&mut self, _obs: &Observation<'_>) -> OperatorCommand {
        self.command.clone()
    }
}

/// One line of a trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub time: f64,
    pub left_position: [f64; 3],
    pub right_position: [f64; 3],
    pub left_orientation: Option<[f64; 9]>,
    pub right_orientation: Option<[f64; 9]>,
    #[serde(default)]
    pub left_gripper: bool,
    #[serde(default)]
    pub right_gripper: bool,
    #[serde(default)]
    pub left_pad: [f64; 2],
    #[serde(default)]
    pub right_pad_x: f64,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("trace is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Zero-order-hold playback of a recorded trace.
pub struct TraceOperator {
    records: Vec<OperatorCommand>,
    times: Vec<f64>,
}

impl TraceOperator {
    /// Parse line-delimited JSON. Orientations default to `defaults`.
    pub fn parse<R: Read>(reader: R, defaults: [Rot3; 2]) -> Result<Self, TraceError> {
        let mut records = Vec::new();
        let mut times: Vec<f64> = Vec::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let invalid = |message: String| TraceError::Invalid { line: n, message };
            let r: TraceRecord = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
            if !r.time.is_finite() {
                return Err(invalid("time must be finite".into()));
            }
            if let Some(&last) = times.last() {
                if r.time <= last {
                    return Err(invalid(format!("time {} does not increase past {last}", r.time)));
                }
            }
            let finite = r
                .left_position
                .iter()
                .chain(&r.right_position)
                .chain(&r.left_pad)
                .chain([&r.right_pad_x])
                .all(|v| v.is_finite());
            if !finite {
                return Err(invalid("non-finite value".into()));
            }
            let rot = |rows: Option<[f64; 9]>, default: Rot3, field: &str| match rows {
                Some(rows) => Rot3::from_row_slice(&rows).map_err(|e| invalid(format!("{field}: {e}"))),
                None => Ok(default),
            };
            let orientations = [
                rot(r.left_orientation, defaults[0], "left_orientation")?,
                rot(r.right_orientation, defaults[1], "right_orientation")?,
            ];
            times.push(r.time);
            records.push(OperatorCommand {
                positions: ArmPair::new(Vec3::from(r.left_position), Vec3::from(r.right_position)),
                orientations,
                grippers: [r.left_gripper, r.right_gripper],
                left_pad: (r.left_pad[0], r.left_pad[1]),
                right_pad_x: r.right_pad_x,
                grasp_mode: None,
                hold: false,
            });
        }
        if records.is_empty() {
            return Err(TraceError::Empty);
        }
        Ok(Self { records, times })
    }
}

impl OperatorSource for TraceOperator {
    fn command(&mut self, obs: &Observation<'_>) -> OperatorCommand {
        let i = self.times.partition_point(|t| *t <= obs.time + 1e-12);
        self.records[i.saturating_sub(1)].clone()
    }

    fn end_time(&self) -> Option<f64> {
        self.times.last().copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Phase {
    Reach,
    /// Robot is close enough; waiting out the reaction time since `since`.
    Closing {
        since: f64,
    },
    /// Gripper closed at `since`; reopens to retry if nothing was grasped.
    Closed {
        since: f64,
    },
}

#[derive(Clone, Debug)]
struct ArmScript {
    goal: Vec3,
    start: Vec3,
    aim: Vec3,
    /// Current nominal command (without jitter).
    nominal: Vec3,
    creeping: bool,
    phase: Phase,
}

/// Simulated operator with limited depth perception: aims short of the
/// goal, creeps forward while the robot is visibly not there yet, closes
/// the gripper after a reaction delay, then lifts.
pub struct ScriptedOperator {
    spec: ScriptSpec,
    base: OperatorCommand,
    arms: [Option<ArmScript>; 2],
    lift_from: Option<(f64, ArmPair)>,
    jitter: Option<Normal<f64>>,
    rng: ChaCha8Rng,
    last_time: f64,
}

impl ScriptedOperator {
    pub fn new(spec: ScriptSpec, initial: OperatorCommand, goals: &[Goal], seed: u64) -> Self {
        let mut arms: [Option<ArmScript>; 2] = [None, None];
        for t in &spec.targets {
            let Some(goal) = goals
                .iter()
                .find(|g| g.object_id == t.object_id && g.arm.is_none_or(|a| a == t.arm))
            else {
                continue;
            };
            let start = *initial.positions.get(t.arm);
            let to_goal = goal.position - start;
            let dist = to_goal.norm();
            let aim = if dist > spec.stop_short {
                goal.position - to_goal / dist * spec.stop_short
            } else {
                start
            };
            arms[t.arm.index()] = Some(ArmScript {
                goal: goal.position,
                start,
                aim,
                nominal: start,
                creeping: false,
                phase: Phase::Reach,
            });
        }
        let jitter = (spec.jitter > 0.0).then(|| Normal::new(0.0, spec.jitter).expect("validated jitter"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Self {
            spec,
            base: initial,
            arms,
            lift_from: None,
            jitter,
            rng,
            last_time: 0.0,
        }
    }

    fn min_jerk(s: f64) -> f64 {
        let s = s.clamp(0.0, 1.0);
        s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
    }
}

impl OperatorSource for ScriptedOperator {
    fn command(&mut self, obs: &Observation<'_>) -> OperatorCommand {
        let t = obs.time;
        let dt = (t - self.last_time).max(0.0);
        self.last_time = t;
        let spec = &self.spec;

        let all_closed = self
            .arms
            .iter()
            .flatten()
            .all(|a| matches!(a.phase, Phase::Closed { .. }));
        let all_holding = Arm::BOTH
            .iter()
            .all(|arm| self.arms[arm.index()].is_none() || obs.holding[arm.index()]);
        if self.lift_from.is_none() && all_closed && all_holding && self.arms.iter().any(Option::is_some) {
            let mut from = self.base.positions;
            for arm in Arm::BOTH {
                if let Some(a) = &self.arms[arm.index()] {
                    *from.get_mut(arm) = a.nominal;
                }
            }
            self.lift_from = Some((t, from));
        }

        let mut cmd = self.base.clone();
        if let Some((t0, from)) = self.lift_from {
            let lift = Vec3::from(spec.lift);
            let travel = (spec.lift_speed * (t - t0)).min(lift.norm());
            let step = if lift.norm() > 0.0 {
                lift.normalize() * travel
            } else {
                Vec3::zeros()
            };
            cmd.positions = ArmPair::new(from.left + step, from.right + step);
            for arm in Arm::BOTH {
                cmd.grippers[arm.index()] = self.arms[arm.index()].is_some();
            }
        } else {
            for arm in Arm::BOTH {
                let Some(a) = &mut self.arms[arm.index()] else { continue };
                let robot = obs.effectors.get(arm);
                let near = (robot - a.goal).norm() <= spec.close_radius;
                let reached = t >= spec.reach_time;
                if reached {
                    let mut elapsed = dt;
                    if !a.creeping {
                        a.creeping = true;
                        a.nominal = a.aim;
                        elapsed = t - spec.reach_time;
                    }
                    if a.phase == Phase::Reach && !near {
                        let gap = a.goal - a.nominal;
                        let step = spec.creep_speed * elapsed;
                        if gap.norm() > step {
                            a.nominal += gap.normalize() * step;
                        } else {
                            a.nominal = a.goal;
                        }
                    }
                } else {
                    a.nominal = a.start + (a.aim - a.start) * Self::min_jerk(t / spec.reach_time);
                }
                a.phase = match a.phase {
                    Phase::Reach if near && reached => Phase::Closing { since: t },
                    Phase::Closing { since } if t - since + 1e-9 >= spec.reaction_time => Phase::Closed { since: t },
                    Phase::Closed { since } if !obs.holding[arm.index()] && t - since + 1e-9 >= spec.reaction_time => {
                        Phase::Reach
                    }
                    p => p,
                };
                *cmd.positions.get_mut(arm) = a.nominal;
                cmd.grippers[arm.index()] = matches!(a.phase, Phase::Closed { .. });
            }
        }

        if let Some(noise) = &self.jitter {
            for arm in Arm::BOTH {
                let p = cmd.positions.get_mut(arm);
                for i in 0..3 {
                    p[i] += noise.sample(&mut self.rng);
                }
            }
        }
        cmd
    }
}

/// Commands from a connected console. With no session, or a silent one,
/// the last command is held and flagged.
pub struct LiveOperator {
    handle: BridgeHandle,
    last: OperatorCommand,
}

impl LiveOperator {
    pub fn new(handle: BridgeHandle, initial: OperatorCommand) -> Self {
        Self { handle, last: initial }
    }

    fn convert(&self, m: &CommandMessage) -> OperatorCommand {
        let rot = |rows: &[f64; 9], fallback: Rot3| Rot3::from_row_slice(rows).unwrap_or(fallback);
        OperatorCommand {
            positions: ArmPair::new(Vec3::from(m.left_position), Vec3::from(m.right_position)),
            orientations: [
                rot(&m.left_orientation, self.last.orientations[0]),
                rot(&m.right_orientation, self.last.orientations[1]),
            ],
            grippers: [m.left_gripper, m.right_gripper],
            left_pad: (m.left_pad[0], m.left_pad[1]),
            right_pad_x: m.right_pad_x,
            grasp_mode: m.grasp_mode.as_ref().map(|g| (g.kind, g.offset.map(Vec3::from))),
            hold: false,
        }
    }
}

impl OperatorSource for LiveOperator {
    fn command(&mut self, _obs: &Observation<'_>) -> OperatorCommand {
        if let Some(m) = self.handle.mailbox().take() {
            self.last = self.convert(&m);
        }
        let mut cmd = self.last.clone();
        if self.handle.is_stale(Instant::now()) {
            cmd.hold = true;
            cmd.left_pad = (0.0, 0.0);
            cmd.right_pad_x = 0.0;
        }
        cmd
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn initial() -> OperatorCommand {
        OperatorCommand::holding(
            ArmPair::new(Vec3::new(0.45, 0.2, 0.35), Vec3::new(0.45, -0.25, 0.35)),
            [Rot3::identity(); 2],
        )
    }

    fn obs(time: f64, effectors: ArmPair, goals: &[Goal]) -> Observation<'_> {
        Observation {
            time,
            effectors,
            holding: [false; 2],
            goals,
        }
    }

    #[test]
    fn trace_zero_order_hold() {
        let text = r#"{"time": 0.0, "left_position": [0.1, 0.2, 0.3], "right_position": [0.1, -0.2, 0.3]}
{"time": 0.5, "left_position": [0.2, 0.2, 0.3], "right_position": [0.1, -0.2, 0.3], "left_gripper": true}
"#;
        let mut t = TraceOperator::parse(text.as_bytes(), [Rot3::identity(); 2]).unwrap();
        let eff = ArmPair::zeros();
        assert_eq!(t.command(&obs(0.3, eff, &[])).positions.left.x, 0.1);
        let c = t.command(&obs(0.5, eff, &[]));
        assert_eq!(c.positions.left.x, 0.2);
        assert!(c.grippers[0]);
        assert_eq!(t.command(&obs(9.0, eff, &[])).positions.left.x, 0.2);
        assert_eq!(t.end_time(), Some(0.5));
    }

    #[test]
    fn trace_rejects_non_increasing_time() {
        let text = r#"{"time": 0.5, "left_position": [0,0,0], "right_position": [0,0,0]}
{"time": 0.5, "left_position": [0,0,0], "right_position": [0,0,0]}"#;
        match TraceOperator::parse(text.as_bytes(), [Rot3::identity(); 2]) {
            Err(TraceError::Invalid { line, .. }) => assert_eq!(line, 2),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn trace_rejects_bad_rotation() {
        let text = r#"{"time": 0.0, "left_position": [0,0,0], "right_position": [0,0,0], "left_orientation": [2,0,0,0,1,0,0,0,1]}"#;
        let err = TraceOperator::parse(text.as_bytes(), [Rot3::identity(); 2])
            .err()
            .unwrap();
        assert!(err.to_string().contains("left_orientation"));
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(matches!(
            TraceOperator::parse("\n".as_bytes(), [Rot3::identity(); 2]),
            Err(TraceError::Empty)
        ));
    }

    #[test]
    fn script_stops_short_then_creeps_and_closes() {
        let goals = vec![Goal::at(Vec3::new(0.75, 0.2, 0.35), "item", Some(Arm::Left))];
        let spec = ScriptSpec {
            targets: vec![crate::scenario::ScriptTarget {
                arm: Arm::Left,
                object_id: "item".into(),
            }],
            ..ScriptSpec::default()
        };
        let mut op = ScriptedOperator::new(spec, initial(), &goals, 1);
        let far = ArmPair::new(Vec3::new(0.45, 0.2, 0.35), Vec3::new(0.45, -0.25, 0.35));
        let at_reach = op.command(&obs(3.0, far, &goals));
        assert!((at_reach.positions.left.x - 0.70).abs() < 1e-12);
        let later = op.command(&obs(4.0, far, &goals));
        assert!((later.positions.left.x - 0.715).abs() < 1e-12);
        assert!(!later.grippers[0]);

        let there = ArmPair::new(Vec3::new(0.745, 0.2, 0.35), far.right);
        let c = op.command(&obs(4.1, there, &goals));
        assert!(!c.grippers[0]);
        assert_eq!(c.positions.left, later.positions.left);
        assert!(!op.command(&obs(4.3, there, &goals)).grippers[0]);
        assert!(op.command(&obs(4.4, there, &goals)).grippers[0]);
    }

    #[test]
    fn script_lifts_once_holding() {
        let goals = vec![Goal::at(Vec3::new(0.75, 0.2, 0.35), "item", Some(Arm::Left))];
        let spec = ScriptSpec {
            targets: vec![crate::scenario::ScriptTarget {
                arm: Arm::Left,
                object_id: "item".into(),
            }],
            reaction_time: 0.0,
            ..ScriptSpec::default()
        };
        let mut op = ScriptedOperator::new(spec, initial(), &goals, 1);
        let there = ArmPair::new(Vec3::new(0.75, 0.2, 0.35), Vec3::new(0.45, -0.25, 0.35));
        op.command(&obs(3.0, there, &goals));
        let c = op.command(&obs(3.1, there, &goals));
        assert!(c.grippers[0]);
        let mut o = obs(3.2, there, &goals);
        o.holding = [true, false];
        let z0 = op.command(&o).positions.left.z;
        o.time = 3.7;
        let z1 = op.command(&o).positions.left.z;
        assert!((z1 - z0 - 0.05).abs() < 1e-12);
    }
}
