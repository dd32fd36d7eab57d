use shelfbot_core::alilqr::{mpc_step, solve, MpcContext, OcProblem, OcpSolution, SharedControlCost, SolverConfig};
use shelfbot_core::constraints::{assemble, ConstraintSet, CouplingContext};
use shelfbot_core::intent::ReferenceTrajectory;
use shelfbot_core::worldmodel::{
    stack, Arm, ArmPair, EllipsoidObstacle, Goal, GoalSet, GraspKind, GraspMode, Plane, PlaneSet, Rot3,
    SharedControlConfig, SharedControlParams, Vec3, Vec6, World,
};

fn config(q: f64, r: f64, horizon_n: usize, horizon_t: f64, u: f64) -> SharedControlConfig {
    SharedControlConfig::new(SharedControlParams {
        q_diag: [q; 6],
        r_diag: [r; 6],
        horizon_n,
        horizon_t,
        u_min: [-u; 3],
        u_max: [u; 3],
        ..Default::default()
    })
    .unwrap()
}

fn run(
    x0: Vec6,
    reference: &ReferenceTrajectory,
    goals: &GoalSet,
    shared: &SharedControlConfig,
    set: &ConstraintSet,
) -> OcpSolution {
    solve(
        OcProblem {
            x0,
            delta: shared.delta(),
            horizon: shared.horizon_n(),
            cost: SharedControlCost::new(reference, goals, shared),
            constraints: set,
        },
        &SolverConfig::default(),
        None,
    )
}

/// Scalar discrete Riccati recursion for `e_{k+1} = e_k + δ u_k` with
/// stage cost `q e² + r u²` and terminal `q e²`. Returns the cost-to-go
/// coefficients `p_0..p_N` and gains `K_0..K_{N-1}` (`u = −K e`).
fn scalar_riccati(q: f64, r: f64, delta: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; n + 1];
    let mut k = vec![0.0; n];
    p[n] = q;
    for i in (0..n).rev() {
        let next = p[i + 1];
        k[i] = delta * next / (r + delta * delta * next);
        p[i] = q + next - delta * next * k[i];
    }
    (p, k)
}

#[test]
fn unconstrained_tracking_matches_riccati() {
    let n = 20;
    let shared = config(1.0, 1.0, n, 2.0, 1e3);
    let delta = shared.delta();
    let target = Vec6::new(0.4, -0.1, 0.3, 0.2, 0.5, -0.2);
    let x0 = Vec6::new(0.1, 0.2, 0.0, -0.3, 0.1, 0.2);
    let reference = ReferenceTrajectory::stationary(target, n);
    let set = assemble(&World::default(), &GraspMode::Independent, &shared, None).unwrap();
    let sol = run(x0, &reference, &GoalSet::empty(), &shared, &set);
    assert!(sol.converged());

    let (p, k) = scalar_riccati(1.0, 1.0, delta, n);
    let mut e = x0 - target;
    let oracle_cost = p[0] * e.norm_squared();
    for (i, (ki, control)) in k.iter().zip(&sol.controls).enumerate() {
        let u = -e * *ki;
        assert!((control - u).amax() < 1e-6, "stage {i}");
        e += u * delta;
    }
    assert!((sol.cost - oracle_cost).abs() < 1e-6);
}

#[test]
fn reach_beyond_limit_saturates() {
    let n = 10;
    let shared = config(1.0, 0.01, n, 1.0, 0.1);
    let x0 = Vec6::zeros();
    let mut target = x0;
    target[0] = 1.0;
    let reference = ReferenceTrajectory::stationary(target, n);
    let set = assemble(&World::default(), &GraspMode::Independent, &shared, None).unwrap();
    let sol = run(x0, &reference, &GoalSet::empty(), &shared, &set);
    assert!(sol.converged());
    for u in &sol.controls {
        assert!((u[0] - 0.1).abs() < 1e-4, "{}", u[0]);
        assert!(u.rows(1, 5).amax() < 1e-4);
    }
}

fn constrained_suite() -> Vec<(Vec6, ReferenceTrajectory, GoalSet, SharedControlConfig, ConstraintSet)> {
    let shared = SharedControlConfig::default();
    let n = shared.horizon_n();
    let mut cases = Vec::new();

    // Reference pushes both arms through a table top.
    let floor = World {
        planes: PlaneSet::new(vec![Plane::new(Vec3::new(0.0, 0.0, 1.0), 0.1).unwrap()]),
        ellipsoids: vec![],
    };
    let x0 = stack(&Vec3::new(0.5, 0.2, 0.2), &Vec3::new(0.5, -0.2, 0.2));
    let v = stack(&Vec3::new(0.0, 0.0, -0.2), &Vec3::new(0.05, 0.0, -0.2));
    cases.push((
        x0,
        ReferenceTrajectory::constant_velocity(x0, v, shared.delta(), n),
        GoalSet::empty(),
        shared.clone(),
        assemble(&floor, &GraspMode::Independent, &shared, None).unwrap(),
    ));

    // Left reference runs through a sphere.
    let sphere = World {
        planes: PlaneSet::default(),
        ellipsoids: vec![EllipsoidObstacle::sphere(Vec3::new(0.6, 0.2, 0.3), 0.05).unwrap()],
    };
    let x0 = stack(&Vec3::new(0.45, 0.21, 0.3), &Vec3::new(0.5, -0.2, 0.3));
    let v = stack(&Vec3::new(0.2, 0.0, 0.0), &Vec3::zeros());
    cases.push((
        x0,
        ReferenceTrajectory::constant_velocity(x0, v, shared.delta(), n),
        GoalSet::empty(),
        shared.clone(),
        assemble(&sphere, &GraspMode::Independent, &shared, None).unwrap(),
    ));

    // Goal attraction next to a wall, with velocity limits.
    let wall = World {
        planes: PlaneSet::new(vec![Plane::new(Vec3::new(-1.0, 0.0, 0.0), -0.62).unwrap()]),
        ellipsoids: vec![],
    };
    let goals = GoalSet::new(vec![Goal::at(Vec3::new(0.64, 0.1, 0.25), "cup", Some(Arm::Left))]);
    let x0 = stack(&Vec3::new(0.55, 0.1, 0.25), &Vec3::new(0.5, -0.2, 0.3));
    cases.push((
        x0,
        ReferenceTrajectory::stationary(x0, n),
        goals,
        shared.clone(),
        assemble(&wall, &GraspMode::Independent, &shared, None).unwrap(),
    ));

    // Coordinated top-down grasp, operator pulling back.
    let left = Vec3::new(0.6, 0.15, 0.3);
    let offset = Vec3::new(0.0, -0.3, 0.0);
    let x0 = stack(&left, &(left + offset));
    let v = stack(&Vec3::new(-0.1, 0.0, 0.02), &Vec3::new(-0.1, 0.02, 0.0));
    let reference = ReferenceTrajectory::constant_velocity(x0, v, shared.delta(), n);
    let ctx = CouplingContext {
        left_orientation: Rot3::identity(),
        right_orientation: Rot3::identity(),
        operator_orientation: Rot3::identity(),
        left_reference: reference
            .positions
            .iter()
            .map(|p| Vec3::new(p[0], p[1], p[2]))
            .collect(),
    };
    let mode = GraspMode::new(GraspKind::TopDownFront, Some(offset)).unwrap();
    cases.push((
        x0,
        reference,
        GoalSet::empty(),
        shared.clone(),
        assemble(&World::default(), &mode, &shared, Some(&ctx)).unwrap(),
    ));
    cases
}

#[test]
fn constrained_suite_converges_with_monotone_violation() {
    for (i, (x0, reference, goals, shared, set)) in constrained_suite().iter().enumerate() {
        let sol = run(*x0, reference, goals, shared, set);
        assert!(sol.converged(), "case {i}: {:?}", sol.status);
        assert!(sol.max_violation <= 1e-4, "case {i}: {}", sol.max_violation);
        assert_eq!(sol.max_violation, set.max_violation(&sol.states, &sol.controls));
        for w in sol.violation_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "case {i}: {:?}", sol.violation_history);
        }
        for (before, after) in &sol.accepted_steps {
            assert!(after <= before, "case {i}");
        }
        for k in 0..sol.controls.len() {
            assert_eq!(sol.states[k + 1], sol.states[k] + sol.controls[k] * shared.delta());
        }
    }
}

#[test]
fn warm_started_mpc_converges_quickly() {
    let shared = SharedControlConfig::default();
    let solver = SolverConfig::default();
    let world = World {
        planes: PlaneSet::new(vec![Plane::new(Vec3::new(0.0, 0.0, 1.0), 0.1).unwrap()]),
        ellipsoids: vec![],
    };
    let goals = GoalSet::empty();
    let ctx = MpcContext {
        world: &world,
        goals: &goals,
        mode: &GraspMode::Independent,
        coupling: None,
        shared: &shared,
        solver: &solver,
    };
    let target = stack(&Vec3::new(0.5, 0.2, 0.05), &Vec3::new(0.5, -0.2, 0.3));
    let reference = ReferenceTrajectory::stationary(target, shared.horizon_n());
    let mut current = ArmPair::new(Vec3::new(0.5, 0.2, 0.1), Vec3::new(0.5, -0.2, 0.3));
    let first = mpc_step(&current, &reference, &ctx, None).unwrap();
    assert!(!first.failed);
    let mut previous = first.solution;
    current = ArmPair::from_stacked(&first.waypoint);
    for _ in 0..5 {
        let step = mpc_step(&current, &reference, &ctx, Some(&previous)).unwrap();
        assert!(!step.failed);
        assert!(
            step.solution.inner_iterations <= 3,
            "{}",
            step.solution.inner_iterations
        );
        current = ArmPair::from_stacked(&step.waypoint);
        previous = step.solution;
    }
}

#[test]
fn ramp_into_free_space_advances_with_operator() {
    let shared = SharedControlConfig::default();
    let solver = SolverConfig::default();
    let world = World::default();
    let goals = GoalSet::empty();
    let ctx = MpcContext {
        world: &world,
        goals: &goals,
        mode: &GraspMode::Independent,
        coupling: None,
        shared: &shared,
        solver: &solver,
    };
    let current = ArmPair::new(Vec3::new(0.5, 0.2, 0.3), Vec3::new(0.5, -0.2, 0.3));
    let v = stack(&Vec3::new(0.1, 0.0, 0.0), &Vec3::new(0.0, 0.05, 0.0));
    let reference = ReferenceTrajectory::constant_velocity(current.stacked(), v, shared.delta(), shared.horizon_n());
    let step = mpc_step(&current, &reference, &ctx, None).unwrap();
    let advance = step.waypoint - current.stacked();
    let expected = v * shared.delta();
    assert!((advance - expected).norm() <= 0.1 * expected.norm());
}

#[test]
fn captured_goal_pulls_the_waypoint() {
    let shared = SharedControlConfig::default();
    let solver = SolverConfig::default();
    let world = World::default();
    let goal = Vec3::new(0.79, 0.1, 0.25);
    let goals = GoalSet::new(vec![Goal::at(goal, "target", Some(Arm::Left))]);
    let ctx = MpcContext {
        world: &world,
        goals: &goals,
        mode: &GraspMode::Independent,
        coupling: None,
        shared: &shared,
        solver: &solver,
    };
    let left = goal - Vec3::new(0.05, 0.0, 0.0);
    let current = ArmPair::new(left, Vec3::new(0.5, -0.2, 0.3));
    let reference = ReferenceTrajectory::stationary(current.stacked(), shared.horizon_n());
    let step = mpc_step(&current, &reference, &ctx, None).unwrap();
    assert!(!step.failed);
    let moved = Vec3::new(step.waypoint[0], step.waypoint[1], step.waypoint[2]) - left;
    assert!(moved.dot(&(goal - left)) > 0.0);
    assert!((Vec3::new(step.waypoint[3], step.waypoint[4], step.waypoint[5]) - current.right).norm() < 1e-6);
}
