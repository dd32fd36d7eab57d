//! The fixed-timestep tick loop.

use std::fs::File;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use shelfbot_bridge::{BridgeHandle, GoalWeight, SolverStats, StateMessage};
use shelfbot_core::alilqr::{mpc_step, MpcContext, OcpSolution, SolveStatus};
use shelfbot_core::armkin::{fk, ik, select_solution, JointVector};
use shelfbot_core::basekin::{body_twist, gate_velocity_with_halt, map_pads, wheel_speeds, BodyTwist};
use shelfbot_core::constraints::CouplingContext;
use shelfbot_core::intent::{propagate_reference, IntentFilter, ReferenceTrajectory};
use shelfbot_core::sharedcost::arbitration;
use shelfbot_core::worldmodel::{
    arm_slice, stack, Arm, ArmPair, EllipsoidObstacle, Goal, GoalSet, GraspKind, GraspMode, Plane, PlaneSet, Rot3,
    Vec3, Vec6, World,
};
use thiserror::Error;

use crate::metrics::{MetricsAccumulator, RunMetrics};
use crate::operator::{
    IdleOperator, LiveOperator, Observation, OperatorCommand, OperatorSource, ScriptedOperator, TraceError,
    TraceOperator,
};
use crate::record::{GoalWeightRecord, ObjectRecord, SolverRecord, TickRecord};
use crate::scan::scan;
use crate::scenario::{OperatorSource as SourceKind, Scenario};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("trace {path}: {source}")]
    Trace {
        path: String,
        #[source]
        source: TraceError,
    },
    #[error("live operation needs a bridge")]
    NoBridge,
    #[error(transparent)]
    Core(#[from] shelfbot_core::Error),
}

/// `[x, y, yaw]` of the base in the world.
fn base_rotation(pose: [f64; 3]) -> Rot3 {
    Rot3::rot_z(pose[2])
}

fn base_translation(pose: [f64; 3]) -> Vec3 {
    Vec3::new(pose[0], pose[1], 0.0)
}

pub fn world_to_base(pose: [f64; 3], p: &Vec3) -> Vec3 {
    base_rotation(pose).transpose() * (p - base_translation(pose))
}

pub fn base_to_world(pose: [f64; 3], p: &Vec3) -> Vec3 {
    base_rotation(pose) * *p + base_translation(pose)
}

/// World geometry expressed in the base frame.
pub fn world_in_base(world: &World, pose: [f64; 3]) -> World {
    let r = base_rotation(pose).transpose();
    let t = base_translation(pose);
    World {
        planes: PlaneSet::new(
            world
                .planes
                .rows
                .iter()
                .map(|p| Plane {
                    normal: r * p.normal,
                    offset: p.offset - p.normal.dot(&t),
                })
                .collect(),
        ),
        ellipsoids: world
            .ellipsoids
            .iter()
            .map(|e| EllipsoidObstacle {
                center: r * (e.center - t),
                orientation: r * e.orientation,
                ..e.clone()
            })
            .collect(),
    }
}

fn goal_in_base(goal: &Goal, pose: [f64; 3]) -> Goal {
    Goal {
        position: world_to_base(pose, &goal.position),
        frame: base_rotation(pose).transpose() * goal.frame,
        ..goal.clone()
    }
}

/// Largest plane or ellipsoid violation of the two effectors.
pub fn state_violation(world: &World, x: &ArmPair) -> f64 {
    let mut worst = 0.0_f64;
    for arm in Arm::BOTH {
        let p = x.get(arm);
        for plane in &world.planes.rows {
            worst = worst.max(-plane.signed_distance(p));
        }
        for e in &world.ellipsoids {
            worst = worst.max(e.margin - e.quadratic(p));
        }
    }
    worst
}

fn min_clearance(world: &World, x: &ArmPair) -> Option<f64> {
    world
        .ellipsoids
        .iter()
        .flat_map(|e| Arm::BOTH.map(|arm| e.clearance(x.get(arm))))
        .reduce(f64::min)
}

/// Decide whether closing a gripper at `effector` grasps `goal`.
pub fn attach_check(gripper_closing: bool, effector: &Vec3, goal: &Goal, radius: f64) -> bool {
    gripper_closing && (effector - goal.position).norm() <= radius
}

fn v3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

#[derive(Clone, Debug)]
struct Object {
    id: String,
    /// World frame.
    position: Vec3,
    start_z: f64,
    /// Object position in the holding effector's frame.
    grip: Option<(Arm, Vec3)>,
    holders: Vec<Arm>,
}

#[derive(Clone, Copy, Debug)]
struct Coupling {
    kind: GraspKind,
    offset: Vec3,
}

pub struct Simulation {
    scenario: Scenario,
    operator: Box<dyn OperatorSource>,
    bridge: Option<BridgeHandle>,
    tick: u64,
    filters: [IntentFilter; 2],
    clutch: [Vec3; 2],
    realized: ArmPair,
    joints: [JointVector; 2],
    orientations: [Rot3; 2],
    base_pose: [f64; 3],
    /// Scenario goals (world frame) and whether each is still active.
    goals: Vec<(Goal, bool)>,
    objects: Vec<Object>,
    holding: [Option<usize>; 2],
    grippers: [bool; 2],
    coupling: Option<Coupling>,
    previous: Option<(bool, OcpSolution)>,
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
    complete: bool,
}

impl Simulation {
    /// Build with the operator described by the scenario. Live scenarios
    /// need [`Simulation::with_bridge`].
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        let initial = initial_command(scenario);
        let operator: Box<dyn OperatorSource> = match scenario.spec.operator.source {
            SourceKind::Idle => Box::new(IdleOperator::new(initial)),
            SourceKind::Trace => {
                let path = scenario.trace_path().expect("validated");
                let file = File::open(&path).map_err(|e| SimError::Trace {
                    path: path.display().to_string(),
                    source: e.into(),
                })?;
                Box::new(
                    TraceOperator::parse(file, scenario.initial_orientation).map_err(|source| SimError::Trace {
                        path: path.display().to_string(),
                        source,
                    })?,
                )
            }
            SourceKind::Scripted => Box::new(ScriptedOperator::new(
                scenario.spec.operator.script.clone(),
                initial,
                &world_goals_in_base(scenario),
                scenario.spec.seed,
            )),
            SourceKind::Live => return Err(SimError::NoBridge),
        };
        Self::with_operator(scenario, operator)
    }

    /// Build driven by a live console through `bridge`.
    pub fn with_bridge(scenario: &Scenario, bridge: BridgeHandle) -> Result<Self, SimError> {
        let operator = Box::new(LiveOperator::new(bridge.clone(), initial_command(scenario)));
        let mut sim = Self::with_operator(scenario, operator)?;
        sim.bridge = Some(bridge);
        Ok(sim)
    }

    pub fn with_operator(scenario: &Scenario, operator: Box<dyn OperatorSource>) -> Result<Self, SimError> {
        let s = scenario;
        let start = ArmPair::new(Vec3::from(s.spec.initial.left), Vec3::from(s.spec.initial.right));
        let mut joints = [JointVector::zeros(); 2];
        for arm in Arm::BOTH {
            let model = &s.arms[arm.index()];
            let sols = ik(model, start.get(arm), &s.initial_orientation[arm.index()])?;
            let (w_l, w_d) = s.selection_weights();
            joints[arm.index()] = select_solution(&sols, &model.q_desired(), &model.q_desired(), &w_l, &w_d)?;
        }
        let filters = [
            IntentFilter::new(start.left, s.spec.kalman)?,
            IntentFilter::new(start.right, s.spec.kalman)?,
        ];
        // One object per id, placed at the mean of its goals.
        let mut objects: Vec<Object> = Vec::new();
        for g in s.goals.iter() {
            if objects.iter().all(|o| o.id != g.object_id) {
                let ps: Vec<Vec3> = s
                    .goals
                    .iter()
                    .filter(|h| h.object_id == g.object_id)
                    .map(|h| h.position)
                    .collect();
                let position = ps.iter().sum::<Vec3>() / ps.len() as f64;
                objects.push(Object {
                    id: g.object_id.clone(),
                    position,
                    start_z: position.z,
                    grip: None,
                    holders: Vec::new(),
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(s.spec.seed);
        rng.set_stream(1);
        Ok(Self {
            scenario: s.clone(),
            operator,
            bridge: None,
            tick: 0,
            filters,
            clutch: [Vec3::zeros(); 2],
            realized: start,
            joints,
            orientations: s.initial_orientation,
            base_pose: s.spec.base.start_pose,
            goals: s.goals.iter().map(|g| (g.clone(), true)).collect(),
            objects,
            holding: [None; 2],
            grippers: [false; 2],
            coupling: None,
            previous: None,
            noise: (s.spec.inner_loop_noise > 0.0)
                .then(|| Normal::new(0.0, s.spec.inner_loop_noise).expect("validated noise")),
            rng,
            complete: false,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn realized(&self) -> &ArmPair {
        &self.realized
    }

    pub fn base_pose(&self) -> [f64; 3] {
        self.base_pose
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.scenario.dt
    }

    /// True once the run should stop: task done, time up, or trace over.
    pub fn finished(&self) -> bool {
        if self.complete || self.tick >= self.scenario.ticks() {
            return true;
        }
        self.operator.end_time().is_some_and(|end| self.time() > end + 1e-9)
    }

    fn active_goals_in_base(&self) -> Vec<Goal> {
        self.goals
            .iter()
            .filter(|(_, active)| *active)
            .map(|(g, _)| goal_in_base(g, self.base_pose))
            .collect()
    }

    /// Advance one tick and describe it.
    pub fn step(&mut self) -> TickRecord {
        let s = &self.scenario;
        let dt = s.dt;
        let time = self.time();
        let pose = self.base_pose;
        let all_goals: Vec<Goal> = self.goals.iter().map(|(g, _)| goal_in_base(g, pose)).collect();

        let cmd = self.operator.command(&Observation {
            time,
            effectors: self.realized,
            holding: self.holding.map(|h| h.is_some()),
            goals: &all_goals,
        });

        for arm in Arm::BOTH {
            let i = arm.index();
            // Finite by construction of every operator source.
            self.filters[i] = self.filters[i]
                .update(cmd.positions.get(arm), dt)
                .unwrap_or_else(|_| self.filters[i].clone());
        }
        let raw_reference = propagate_reference(&self.filters[0], &self.filters[1], &s.shared);

        // Grasp mode and coupling.
        let requested = cmd
            .grasp_mode
            .or_else(|| s.scheduled_mode(time).map(|m| (m.kind, m.offset)))
            .unwrap_or((GraspKind::Independent, None));
        let shared_object = match self.holding {
            [Some(a), Some(b)] if a == b => Some(a),
            _ => None,
        };
        let want_coupling = requested.0 != GraspKind::Independent && shared_object.is_some();
        match (want_coupling, self.coupling) {
            (true, Some(c)) if c.kind == requested.0 => {}
            (true, _) => {
                let r_l = cmd.orientations[0];
                let offset = requested
                    .1
                    .unwrap_or_else(|| r_l.transpose() * (self.realized.right - self.realized.left));
                self.coupling = Some(Coupling {
                    kind: requested.0,
                    offset,
                });
                for arm in Arm::BOTH {
                    self.reanchor(arm, &raw_reference);
                }
                if let Some(obj) = shared_object {
                    self.grip(obj, Arm::Left);
                }
            }
            (false, Some(_)) => {
                self.coupling = None;
                if let Some(obj) = shared_object.or(self.holding[0]) {
                    if let Some(&holder) = self.objects[obj].holders.first() {
                        self.grip(obj, holder);
                    }
                }
            }
            (false, None) => {}
        }
        let s = &self.scenario;
        let reference = raw_reference.shifted(&stack(&self.clutch[0], &self.clutch[1]));

        let r_l = cmd.orientations[0];
        let mut orientations = cmd.orientations;
        let (mode, coupling_ctx) = match self.coupling {
            Some(c) => {
                orientations[1] = match c.kind {
                    GraspKind::Side => r_l * Rot3::rot_z(std::f64::consts::PI),
                    _ => r_l,
                };
                let mode = GraspMode::new(c.kind, Some(c.offset)).expect("coordinated kind with offset");
                let ctx = CouplingContext {
                    left_orientation: r_l,
                    right_orientation: orientations[1],
                    operator_orientation: r_l,
                    left_reference: reference.positions.iter().map(|x| arm_slice(x, Arm::Left)).collect(),
                };
                (mode, Some(ctx))
            }
            None => (GraspMode::Independent, None),
        };

        let world = world_in_base(&s.world, pose);
        let goals = GoalSet::new(self.active_goals_in_base());
        let coupled = self.coupling.is_some();
        let previous = match &self.previous {
            Some((c, sol)) if *c == coupled => Some(sol),
            _ => None,
        };
        let ctx = MpcContext {
            world: &world,
            goals: &goals,
            mode: &mode,
            coupling: coupling_ctx.as_ref(),
            shared: &s.shared,
            solver: &s.spec.solver,
        };
        let mut planned: Vec<Vec6> = Vec::new();
        let (waypoint, solver) = match mpc_step(&self.realized, &reference, &ctx, previous) {
            Ok(step) => {
                let record = SolverRecord {
                    status: step.solution.status,
                    failed: step.failed,
                    outer_iterations: step.solution.outer_iterations,
                    inner_iterations: step.solution.inner_iterations,
                    cost: step.solution.cost,
                    max_violation: step.solution.max_violation,
                };
                if !step.failed {
                    planned = step.solution.states[1..].to_vec();
                }
                self.previous = (!step.failed).then_some((coupled, step.solution));
                (step.waypoint, record)
            }
            Err(e) => {
                log::warn!(target: "sim", "tick {}: solve skipped: {e}", self.tick);
                self.previous = None;
                (
                    self.realized.stacked(),
                    SolverRecord {
                        status: SolveStatus::Diverged,
                        failed: true,
                        outer_iterations: 0,
                        inner_iterations: 0,
                        cost: f64::NAN,
                        max_violation: f64::NAN,
                    },
                )
            }
        };
        if solver.failed {
            log::debug!(target: "sim", "tick {}: solver failed, holding", self.tick);
        }
        // A coupled solve fails when the anchored reference runs away from
        // the held arms; restart the reference at the arms.
        let resync = solver.failed && coupled;

        // Identity inner loop, optionally perturbed.
        let mut realized = ArmPair::from_stacked(&waypoint);
        if let Some(noise) = &self.noise {
            for arm in Arm::BOTH {
                let p = realized.get_mut(arm);
                for i in 0..3 {
                    p[i] += noise.sample(&mut self.rng);
                }
            }
        }

        let (w_l, w_d) = s.selection_weights();
        let mut ik_failed = [false; 2];
        for arm in Arm::BOTH {
            let i = arm.index();
            let model = &s.arms[i];
            let chosen = ik(model, realized.get(arm), &orientations[i])
                .and_then(|sols| select_solution(&sols, &self.joints[i], &model.q_desired(), &w_l, &w_d));
            match chosen {
                Ok(q) => self.joints[i] = q,
                Err(_) => {
                    ik_failed[i] = true;
                    *realized.get_mut(arm) = fk(model, &self.joints[i]).position;
                    orientations[i] = self.orientations[i];
                }
            }
        }
        self.orientations = orientations;

        // Base.
        let b = &s.spec.base;
        let commanded_twist = map_pads(
            cmd.left_pad,
            cmd.right_pad_x,
            (b.pad_scale[0], b.pad_scale[1], b.pad_scale[2]),
        );
        let readings = scan(pose, &s.spec.world.base_obstacles, b.scan_rays, b.scan_max_range);
        let gated = gate_velocity_with_halt(&commanded_twist, &readings, b.stop_range, s.halt_range());
        let twist: BodyTwist = body_twist(&wheel_speeds(&gated, &b.mecanum), &b.mecanum);
        let (sin, cos) = pose[2].sin_cos();
        let new_pose = [
            pose[0] + (twist.vx * cos - twist.vy * sin) * dt,
            pose[1] + (twist.vx * sin + twist.vy * cos) * dt,
            pose[2] + twist.wz * dt,
        ];

        // Goal distances and attachment, in the frame the robot saw this tick.
        let mut goal_distance = [None; 2];
        let mut attached: [Option<String>; 2] = [None, None];
        let mask = s.shared.mask_foreign_goals();
        let grasp_radius = s.spec.grasp_radius;
        self.realized = realized;
        for arm in Arm::BOTH {
            let i = arm.index();
            let p = *realized.get(arm);
            let nearest = self
                .goals
                .iter()
                .enumerate()
                .filter(|(_, (g, active))| *active && g.applies_to(arm, mask))
                .map(|(j, (g, _))| (j, (p - world_to_base(pose, &g.position)).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            goal_distance[i] = nearest.map(|(_, d)| d);

            let closing = cmd.grippers[i] && !self.grippers[i];
            let opening = !cmd.grippers[i] && self.grippers[i];
            if opening {
                if let Some(obj) = self.holding[i].take() {
                    self.objects[obj].holders.retain(|a| *a != arm);
                    match self.objects[obj].holders.first().copied() {
                        Some(h) => self.grip(obj, h),
                        None => self.objects[obj].grip = None,
                    }
                }
            }
            if let Some((j, _)) = nearest {
                let goal = goal_in_base(&self.goals[j].0, pose);
                if self.holding[i].is_none() && attach_check(closing, &p, &goal, grasp_radius) {
                    self.goals[j].1 = false;
                    let obj = self
                        .objects
                        .iter()
                        .position(|o| o.id == goal.object_id)
                        .expect("every goal has an object");
                    self.holding[i] = Some(obj);
                    self.objects[obj].holders.push(arm);
                    attached[i] = Some(goal.object_id.clone());
                    let s = &self.scenario;
                    let fresh = propagate_reference(&self.filters[0], &self.filters[1], &s.shared);
                    self.reanchor(arm, &fresh);
                    let holder = self.objects[obj].holders[0];
                    self.grip(obj, holder);
                }
            }
            self.grippers[i] = cmd.grippers[i];
        }
        if resync {
            for arm in Arm::BOTH {
                self.reanchor(arm, &raw_reference);
            }
        }
        self.base_pose = new_pose;

        // Carry held objects.
        for o in &mut self.objects {
            if let Some((arm, local)) = o.grip {
                let i = arm.index();
                let p = self.realized.get(arm) + self.orientations[i] * local;
                o.position = base_to_world(new_pose, &p);
            }
        }

        let s = &self.scenario;
        let world_now = world_in_base(&s.world, new_pose);
        let violation = state_violation(&world_now, &self.realized);
        let clearance = min_clearance(&world_now, &self.realized);
        let clear = clearance.is_none_or(|c| c > 0.0);
        let lifted = self
            .objects
            .iter()
            .any(|o| !o.holders.is_empty() && o.position.z - o.start_z >= s.spec.lift_height);
        self.complete = self.complete || (lifted && clear);

        let weights = arbitration(&self.realized.stacked(), &goals, &s.shared);
        let mut horizon_k_min = [weights.k_min.left, weights.k_min.right];
        for x in &planned {
            let k = arbitration(x, &goals, &s.shared).k_min;
            horizon_k_min = [horizon_k_min[0].min(k.left), horizon_k_min[1].min(k.right)];
        }
        let x1 = reference.positions[1];
        let tracking_error = Arm::BOTH.map(|arm| (self.realized.get(arm) - arm_slice(&x1, arm)).norm());

        let record = TickRecord {
            tick: self.tick,
            time,
            commanded: Arm::BOTH.map(|a| v3(cmd.positions.get(a))),
            orientation: self.orientations.map(|r| r.to_row_array()),
            reference: Arm::BOTH.map(|a| v3(&arm_slice(&x1, a))),
            waypoint: Arm::BOTH.map(|a| v3(&arm_slice(&waypoint, a))),
            realized: Arm::BOTH.map(|a| v3(self.realized.get(a))),
            joints: self.joints.map(|q| [q[0], q[1], q[2], q[3], q[4], q[5]]),
            base_pose: new_pose,
            base_command: [commanded_twist.vx, commanded_twist.vy, commanded_twist.wz],
            base_twist: [twist.vx, twist.vy, twist.wz],
            goal_weights: goals
                .iter()
                .zip(&weights.per_goal)
                .map(|(g, w)| GoalWeightRecord {
                    object_id: g.object_id.clone(),
                    left: w.k.left,
                    right: w.k.right,
                })
                .collect(),
            k_min: [weights.k_min.left, weights.k_min.right],
            horizon_k_min,
            goal_distance,
            tracking_error,
            inter_effector: (self.realized.left - self.realized.right).norm(),
            violation,
            min_clearance: clearance,
            mode: requested.0,
            coupled,
            attached,
            objects: self
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    object_id: o.id.clone(),
                    position: v3(&o.position),
                    holders: o.holders.clone(),
                })
                .collect(),
            hold: cmd.hold,
            ik_failed,
            solver,
            complete: self.complete,
        };
        if let Some(bridge) = &self.bridge {
            bridge.publish(state_message(&record));
        }
        self.tick += 1;
        record
    }

    /// Shift `arm`'s reference so it starts where the effector is now.
    fn reanchor(&mut self, arm: Arm, raw: &ReferenceTrajectory) {
        let i = arm.index();
        self.clutch[i] = self.realized.get(arm) - arm_slice(&raw.positions[0], arm);
    }

    /// Make `obj` follow `arm` rigidly from its current relative placement.
    fn grip(&mut self, obj: usize, arm: Arm) {
        let i = arm.index();
        let pose = self.base_pose;
        let o = &mut self.objects[obj];
        let rel = world_to_base(pose, &o.position) - self.realized.get(arm);
        o.grip = Some((arm, self.orientations[i].transpose() * rel));
    }

    /// Run to the end, returning every record and the metrics.
    pub fn run(&mut self) -> RunOutput {
        let mut records = Vec::new();
        let mut acc = MetricsAccumulator::new();
        while !self.finished() {
            let r = self.step();
            acc.push(&r);
            records.push(r);
        }
        RunOutput {
            records,
            metrics: acc.finish(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<crate::record::TickRecord>,
    pub metrics: RunMetrics,
}

fn initial_command(s: &Scenario) -> OperatorCommand {
    OperatorCommand::holding(
        ArmPair::new(Vec3::from(s.spec.initial.left), Vec3::from(s.spec.initial.right)),
        s.initial_orientation,
    )
}

fn world_goals_in_base(s: &Scenario) -> Vec<Goal> {
    s.goals
        .iter()
        .map(|g| goal_in_base(g, s.spec.base.start_pose))
        .collect()
}

/// Bridge view of a tick.
pub fn state_message(r: &TickRecord) -> StateMessage {
    let holding = |arm: Arm| {
        r.objects
            .iter()
            .filter(|o| o.holders.contains(&arm))
            .map(|o| o.object_id.clone())
            .next()
    };
    let mut attached: Vec<String> = Arm::BOTH.iter().filter_map(|a| holding(*a)).collect();
    attached.dedup();
    StateMessage {
        tick: r.tick,
        time: r.time,
        left_position: r.realized[0],
        right_position: r.realized[1],
        left_orientation: r.orientation[0],
        right_orientation: r.orientation[1],
        left_joints: r.joints[0],
        right_joints: r.joints[1],
        base_pose: r.base_pose,
        goal_weights: r
            .goal_weights
            .iter()
            .map(|g| GoalWeight {
                object_id: g.object_id.clone(),
                left: g.left,
                right: g.right,
            })
            .collect(),
        grasp_mode: r.mode,
        attached,
        hold: r.hold,
        solver: SolverStats {
            converged: r.solver.status == SolveStatus::Converged,
            outer_iterations: r.solver.outer_iterations as u32,
            inner_iterations: r.solver.inner_iterations as u32,
            cost: r.solver.cost,
            max_violation: r.solver.max_violation,
        },
    }
}
