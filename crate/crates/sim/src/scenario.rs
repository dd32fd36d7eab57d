//! Scenario files (TOML) and their validation into runtime objects.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shelfbot_core::alilqr::SolverConfig;
use shelfbot_core::armkin::{ArmModel, DhParam, JointVector, Pose};
use shelfbot_core::basekin::MecanumParams;
use shelfbot_core::intent::KalmanNoise;
use shelfbot_core::worldmodel::{
    Arm, EllipsoidObstacle, Goal, GoalSet, GraspKind, GraspMode, Plane, PlaneSet, Rot3, SharedControlConfig,
    SharedControlParams, Vec3, World,
};
use thiserror::Error;

/// Roll, pitch, yaw in degrees: `R = Rz(yaw) Ry(pitch) Rx(roll)`.
pub fn rpy_deg(rpy: [f64; 3]) -> Rot3 {
    let [r, p, y] = rpy.map(f64::to_radians);
    Rot3::rot_z(y) * Rot3::rot_y(p) * Rot3::rot_x(r)
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub normal: [f64; 3],
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipsoidSpec {
    pub center: [f64; 3],
    /// Sphere radius; exclusive with `scale`/`margin`.
    pub radius: Option<f64>,
    pub scale: Option<[f64; 3]>,
    pub margin: Option<f64>,
    #[serde(default)]
    pub rpy_deg: [f64; 3],
}

/// Obstacle seen by the base scanner: a vertical cylinder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircleSpec {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    #[serde(default)]
    pub planes: Vec<PlaneSpec>,
    #[serde(default)]
    pub ellipsoids: Vec<EllipsoidSpec>,
    #[serde(default)]
    pub base_obstacles: Vec<CircleSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalSpec {
    pub object_id: String,
    pub position: [f64; 3],
    pub arm: Option<Arm>,
    #[serde(default = "unit3")]
    pub approach_weights: [f64; 3],
    #[serde(default)]
    pub rpy_deg: [f64; 3],
}

fn unit3() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub mount_position: [f64; 3],
    #[serde(default)]
    pub mount_rpy_deg: [f64; 3],
    pub dh: Option<[DhParam; 6]>,
    pub lower: Option<[f64; 6]>,
    pub upper: Option<[f64; 6]>,
    pub q_desired: Option<[f64; 6]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSpec {
    pub left: ArmSpec,
    pub right: ArmSpec,
}

impl Default for RobotSpec {
    fn default() -> Self {
        let arm = |y: f64, roll: f64| ArmSpec {
            mount_position: [0.15, y, 0.3],
            mount_rpy_deg: [roll, 0.0, 0.0],
            dh: None,
            lower: None,
            upper: None,
            q_desired: None,
        };
        Self {
            left: arm(0.2, -45.0),
            right: arm(-0.2, 45.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub left: [f64; 3],
    pub right: [f64; 3],
    #[serde(default = "forward_rpy")]
    pub left_rpy_deg: [f64; 3],
    #[serde(default = "forward_rpy")]
    pub right_rpy_deg: [f64; 3],
}

fn forward_rpy() -> [f64; 3] {
    [0.0, 90.0, 0.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseSpec {
    pub mecanum: MecanumParams,
    /// `[x, y, yaw]`, yaw in radians.
    pub start_pose: [f64; 3],
    /// Full-deflection pad speeds (m/s, m/s, rad/s).
    pub pad_scale: [f64; 3],
    pub stop_range: f64,
    /// Full linear stop distance; defaults to half of `stop_range`.
    pub halt_range: Option<f64>,
    pub scan_rays: usize,
    pub scan_max_range: f64,
}

impl Default for BaseSpec {
    fn default() -> Self {
        Self {
            mecanum: MecanumParams::default(),
            start_pose: [0.0; 3],
            pad_scale: [0.3, 0.3, 0.6],
            stop_range: 0.6,
            halt_range: None,
            scan_rays: 72,
            scan_max_range: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSpec {
    pub w_l: [f64; 6],
    pub w_d: [f64; 6],
}

impl Default for SelectionSpec {
    fn default() -> Self {
        Self {
            w_l: [1.0; 6],
            w_d: [0.1; 6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub time: f64,
    pub kind: GraspKind,
    pub offset: Option<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorSource {
    /// Hold the initial commands.
    #[default]
    Idle,
    Trace,
    Scripted,
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptTarget {
    pub arm: Arm,
    pub object_id: String,
}

/// Reactive scripted operator: minimum-jerk reach that stops short of the
/// goal, then a slow creep until the robot is close enough to grasp, then
/// a lift (or pull-out when both arms hold the same object).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptSpec {
    pub targets: Vec<ScriptTarget>,
    pub reach_time: f64,
    pub stop_short: f64,
    /// Standard deviation of i.i.d. per-axis command jitter (m).
    pub jitter: f64,
    pub creep_speed: f64,
    /// Robot-to-goal distance at which the operator decides to close.
    pub close_radius: f64,
    pub reaction_time: f64,
    /// Displacement applied after the grasp.
    pub lift: [f64; 3],
    pub lift_speed: f64,
}

impl Default for ScriptSpec {
    fn default() -> Self {
        Self {
            targets: Vec::new(),
            reach_time: 3.0,
            stop_short: 0.05,
            jitter: 0.0,
            creep_speed: 0.015,
            close_radius: 0.02,
            reaction_time: 0.3,
            lift: [0.0, 0.0, 0.08],
            lift_speed: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorSpec {
    pub source: OperatorSource,
    /// Trace file, relative to the scenario file.
    pub trace: Option<PathBuf>,
    pub script: ScriptSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default = "default_tick_hz")]
    pub tick_hz: f64,
    /// Simulated time limit (s).
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of Gaussian noise on each realized waypoint (m).
    #[serde(default)]
    pub inner_loop_noise: f64,
    /// Height an attached object must rise for the task to count as done.
    #[serde(default = "default_lift_height")]
    pub lift_height: f64,
    #[serde(default = "default_grasp_radius")]
    pub grasp_radius: f64,
    #[serde(default)]
    pub world: WorldSpec,
    #[serde(default)]
    pub goals: Vec<GoalSpec>,
    #[serde(default)]
    pub robot: RobotSpec,
    pub initial: InitialSpec,
    #[serde(default)]
    pub shared_control: SharedControlParams,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub kalman: KalmanNoise,
    #[serde(default)]
    pub base: BaseSpec,
    #[serde(default)]
    pub selection: SelectionSpec,
    #[serde(default)]
    pub grasp_schedule: Vec<ScheduleEntry>,
    #[serde(default)]
    pub operator: OperatorSpec,
}

fn default_tick_hz() -> f64 {
    10.0
}

fn default_lift_height() -> f64 {
    0.05
}

fn default_grasp_radius() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario:\n{}", format_issues(.0))]
    Invalid(Vec<FieldIssue>),
}

fn format_issues(issues: &[FieldIssue]) -> String {
    issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n")
}

#[derive(Clone, Debug)]
pub struct ScheduledMode {
    pub time: f64,
    pub kind: GraspKind,
    pub offset: Option<Vec3>,
}

/// A validated scenario ready to simulate.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    /// Directory used to resolve relative paths.
    pub base_dir: PathBuf,
    pub world: World,
    pub goals: GoalSet,
    pub arms: [ArmModel; 2],
    pub shared: SharedControlConfig,
    pub schedule: Vec<ScheduledMode>,
    pub initial_orientation: [Rot3; 2],
    pub dt: f64,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base_dir)
    }

    pub fn from_toml(text: &str, base_dir: PathBuf) -> Result<Self, ScenarioError> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        Self::from_spec(spec, base_dir)
    }

    pub fn from_spec(spec: ScenarioSpec, base_dir: PathBuf) -> Result<Self, ScenarioError> {
        let mut v = Validator::default();
        let s = &spec;

        v.check(s.tick_hz.is_finite() && s.tick_hz > 0.0, "tick_hz", "must be positive");
        v.check(
            s.duration.is_finite() && s.duration > 0.0,
            "duration",
            "must be positive",
        );
        v.check(
            s.inner_loop_noise.is_finite() && s.inner_loop_noise >= 0.0,
            "inner_loop_noise",
            "must be non-negative",
        );
        v.check(
            s.lift_height.is_finite() && s.lift_height > 0.0,
            "lift_height",
            "must be positive",
        );
        v.check(
            s.grasp_radius.is_finite() && s.grasp_radius > 0.0,
            "grasp_radius",
            "must be positive",
        );

        let mut planes = Vec::new();
        for (i, p) in s.world.planes.iter().enumerate() {
            if let Some(plane) = v.core(Plane::new(v3(p.normal), p.offset), format!("world.planes[{i}]")) {
                planes.push(plane);
            }
        }
        let mut ellipsoids = Vec::new();
        for (i, e) in s.world.ellipsoids.iter().enumerate() {
            let path = format!("world.ellipsoids[{i}]");
            let built = match (e.radius, e.scale, e.margin) {
                (Some(r), None, None) => Some(EllipsoidObstacle::sphere(v3(e.center), r).map(|mut o| {
                    o.orientation = rpy_deg(e.rpy_deg);
                    o
                })),
                (None, Some(scale), Some(margin)) => Some(EllipsoidObstacle::new(
                    v3(e.center),
                    rpy_deg(e.rpy_deg),
                    v3(scale),
                    margin,
                )),
                _ => {
                    v.issue(&path, "give either `radius` or both `scale` and `margin`");
                    None
                }
            };
            if let Some(o) = built.and_then(|b| v.core(b, path)) {
                ellipsoids.push(o);
            }
        }
        for (i, c) in s.world.base_obstacles.iter().enumerate() {
            v.check(
                c.radius.is_finite() && c.radius > 0.0 && c.center.iter().all(|x| x.is_finite()),
                format!("world.base_obstacles[{i}]"),
                "needs a finite center and positive radius",
            );
        }

        let mut goals = Vec::new();
        for (i, g) in s.goals.iter().enumerate() {
            let path = format!("goals[{i}]");
            v.check(
                !g.object_id.is_empty(),
                format!("{path}.object_id"),
                "must not be empty",
            );
            if let Some(goal) = v.core(
                Goal::new(
                    v3(g.position),
                    rpy_deg(g.rpy_deg),
                    g.object_id.clone(),
                    v3(g.approach_weights),
                    g.arm,
                ),
                path,
            ) {
                goals.push(goal);
            }
        }

        let arm_model = |spec: &ArmSpec| {
            let mount = Pose {
                position: v3(spec.mount_position),
                orientation: rpy_deg(spec.mount_rpy_deg),
            };
            let mut model = ArmModel::ur5e(mount);
            if let Some(dh) = spec.dh {
                model.dh = dh;
            }
            if let Some(l) = spec.lower {
                model.lower = l;
            }
            if let Some(u) = spec.upper {
                model.upper = u;
            }
            if let Some(q) = spec.q_desired {
                model.q_desired = q;
            }
            model
        };
        let arms = [arm_model(&s.robot.left), arm_model(&s.robot.right)];
        for (arm, model) in Arm::BOTH.iter().zip(&arms) {
            v.core(model.validate(), format!("robot.{arm}"));
        }

        let shared = v.core(
            SharedControlConfig::new(s.shared_control.clone()),
            "shared_control".into(),
        );
        if let Some(shared) = &shared {
            v.check(
                (shared.delta() * s.tick_hz - 1.0).abs() < 1e-9,
                "shared_control.horizon_t",
                "horizon step T/N must equal the tick period 1/tick_hz",
            );
        }
        v.core(s.solver.validate(), "solver".into());
        v.core(s.kalman.validate(), "kalman".into());
        v.core(s.base.mecanum.validate(), "base.mecanum".into());
        v.check(
            s.base.stop_range.is_finite() && s.base.stop_range > 0.0,
            "base.stop_range",
            "must be positive",
        );
        if let Some(h) = s.base.halt_range {
            v.check(
                h.is_finite() && h >= 0.0 && h <= s.base.stop_range,
                "base.halt_range",
                "must be between 0 and stop_range",
            );
        }
        v.check(s.base.scan_rays > 0, "base.scan_rays", "must be positive");
        v.check(
            s.base.scan_max_range.is_finite() && s.base.scan_max_range > 0.0,
            "base.scan_max_range",
            "must be positive",
        );
        v.check(
            s.base.pad_scale.iter().chain(&s.base.start_pose).all(|x| x.is_finite()),
            "base",
            "pad_scale and start_pose must be finite",
        );
        for (name, w) in [("selection.w_l", &s.selection.w_l), ("selection.w_d", &s.selection.w_d)] {
            v.check(
                w.iter().all(|x| x.is_finite() && *x >= 0.0),
                name,
                "weights must be non-negative",
            );
        }

        let mut schedule = Vec::new();
        let mut last_time = f64::NEG_INFINITY;
        for (i, e) in s.grasp_schedule.iter().enumerate() {
            let path = format!("grasp_schedule[{i}]");
            v.check(
                e.time.is_finite() && e.time > last_time,
                format!("{path}.time"),
                "times must be finite and strictly increasing",
            );
            last_time = e.time;
            if e.kind == GraspKind::Independent && e.offset.is_some() {
                v.issue(format!("{path}.offset"), "independent mode takes no offset");
            }
            schedule.push(ScheduledMode {
                time: e.time,
                kind: e.kind,
                offset: e.offset.map(v3),
            });
        }

        match s.operator.source {
            OperatorSource::Trace => {
                v.check(
                    s.operator.trace.is_some(),
                    "operator.trace",
                    "required for a trace operator",
                );
            }
            OperatorSource::Scripted => {
                let sc = &s.operator.script;
                v.check(
                    !sc.targets.is_empty(),
                    "operator.script.targets",
                    "at least one target is required",
                );
                for (i, t) in sc.targets.iter().enumerate() {
                    let found = goals
                        .iter()
                        .any(|g| g.object_id == t.object_id && g.arm.is_none_or(|a| a == t.arm));
                    v.check(
                        found,
                        format!("operator.script.targets[{i}]"),
                        format!("no goal for object '{}' usable by the {} arm", t.object_id, t.arm),
                    );
                }
                for (name, value) in [
                    ("reach_time", sc.reach_time),
                    ("creep_speed", sc.creep_speed),
                    ("close_radius", sc.close_radius),
                    ("lift_speed", sc.lift_speed),
                ] {
                    v.check(
                        value.is_finite() && value > 0.0,
                        format!("operator.script.{name}"),
                        "must be positive",
                    );
                }
                for (name, value) in [
                    ("stop_short", sc.stop_short),
                    ("jitter", sc.jitter),
                    ("reaction_time", sc.reaction_time),
                ] {
                    v.check(
                        value.is_finite() && value >= 0.0,
                        format!("operator.script.{name}"),
                        "must be non-negative",
                    );
                }
            }
            OperatorSource::Idle | OperatorSource::Live => {}
        }

        let initial_orientation = [rpy_deg(s.initial.left_rpy_deg), rpy_deg(s.initial.right_rpy_deg)];
        v.check(
            s.initial.left.iter().chain(&s.initial.right).all(|x| x.is_finite()),
            "initial",
            "positions must be finite",
        );
        for (arm, model) in Arm::BOTH.iter().zip(&arms) {
            let p = match arm {
                Arm::Left => v3(s.initial.left),
                Arm::Right => v3(s.initial.right),
            };
            let reachable = shelfbot_core::armkin::ik(model, &p, &initial_orientation[arm.index()])
                .map(|sols| !sols.is_empty())
                .unwrap_or(false);
            v.check(reachable, format!("initial.{arm}"), "pose is not reachable by the arm");
        }

        v.finish()?;
        let shared = shared.expect("validated");
        let dt = 1.0 / spec.tick_hz;
        Ok(Scenario {
            world: World {
                planes: PlaneSet::new(planes),
                ellipsoids,
            },
            goals: GoalSet::new(goals),
            arms,
            shared,
            schedule,
            initial_orientation,
            dt,
            spec,
            base_dir,
        })
    }

    pub fn ticks(&self) -> u64 {
        (self.spec.duration * self.spec.tick_hz).round() as u64
    }

    /// Scheduled mode at time `t`.
    pub fn scheduled_mode(&self, t: f64) -> Option<&ScheduledMode> {
        self.schedule.iter().rev().find(|m| m.time <= t + 1e-12)
    }

    pub fn halt_range(&self) -> f64 {
        self.spec.base.halt_range.unwrap_or(self.spec.base.stop_range / 2.0)
    }

    pub fn selection_weights(&self) -> (JointVector, JointVector) {
        (
            JointVector::from_row_slice(&self.spec.selection.w_l),
            JointVector::from_row_slice(&self.spec.selection.w_d),
        )
    }

    pub fn trace_path(&self) -> Option<PathBuf> {
        self.spec.operator.trace.as_ref().map(|p| self.base_dir.join(p))
    }

    /// A copy with the goal-attraction term on or off.
    pub fn with_assist(&self, assist: bool) -> Self {
        let mut s = self.clone();
        s.spec.shared_control.assist = assist;
        s.shared = s.shared.with_assist(assist);
        s
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.spec.seed = seed;
        s
    }

    pub fn goal_mode(kind: GraspKind, offset: Option<Vec3>) -> Option<GraspMode> {
        GraspMode::new(kind, offset).ok()
    }
}

#[derive(Default)]
struct Validator {
    issues: Vec<FieldIssue>,
}

impl Validator {
    fn issue(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(FieldIssue {
            path: path.into(),
            message: message.into(),
        });
    }

    fn check(&mut self, ok: bool, path: impl Into<String>, message: impl Into<String>) {
        if !ok {
            self.issue(path, message);
        }
    }

    fn core<T>(&mut self, r: shelfbot_core::Result<T>, path: String) -> Option<T> {
        match r {
            Ok(t) => Some(t),
            Err(e) => {
                self.issue(path, e.to_string());
                None
            }
        }
    }

    fn finish(self) -> Result<(), ScenarioError> {
        if self.issues.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(self.issues))
        }
    }
}
