//! Augmented-Lagrangian iLQR for the end-effector point-mass problem
//! `x_{k+1} = x_k + u_k δ`, and the receding-horizon step built on it.
//!
//! The outer loop updates multipliers and the penalty; the inner loop is a
//! regularized iLQR on the augmented Lagrangian. Inequalities use the
//! smooth `max(0, λ + μc)` form, equalities the plain `λᵀh + μ/2 ‖h‖²` form.
//! Constraint curvature is dropped (Gauss-Newton), so every backward pass
//! stays positive semidefinite.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraints::{assemble, Argument, Constraint, ConstraintKind, ConstraintSet, CouplingContext};
use crate::error::Result;
use crate::intent::ReferenceTrajectory;
use crate::sharedcost::{
    arbitration, cost_derivatives_frozen, stage_cost, stage_cost_frozen, state_cost_frozen, state_derivatives_frozen,
    ArbitrationWeights,
};
use crate::worldmodel::{ArmPair, GoalSet, GraspMode, Mat6, SharedControlConfig, Vec6, World};

/// Quadratic model of one stage.
#[derive(Clone, Debug)]
pub struct StageDerivatives {
    pub lx: Vec6,
    pub lu: Vec6,
    pub lxx: Mat6,
    pub luu: Mat6,
}

/// Objective of an optimal control problem over `N` stages plus a terminal
/// state term.
///
/// `refresh` is called with the current state trajectory before each
/// backward pass; costs with state-dependent weights freeze them there and
/// evaluate `stage`/`terminal` at those frozen weights until the next call.
pub trait TrajectoryCost {
    fn refresh(&mut self, _states: &[Vec6]) {}
    fn stage(&self, k: usize, x: &Vec6, u: &Vec6) -> f64;
    fn stage_derivatives(&self, k: usize, x: &Vec6, u: &Vec6) -> StageDerivatives;
    fn terminal(&self, x: &Vec6) -> f64;
    fn terminal_derivatives(&self, x: &Vec6) -> (Vec6, Mat6);
    /// Default control guess when no warm start is given.
    fn initial_controls(&self, horizon: usize) -> Vec<Vec6> {
        vec![Vec6::zeros(); horizon]
    }
    /// Objective without any frozen approximation.
    fn exact_total(&self, states: &[Vec6], controls: &[Vec6]) -> f64;
}

/// The blended teleoperation/assistance objective over a horizon.
pub struct SharedControlCost<'a> {
    reference: &'a ReferenceTrajectory,
    goals: &'a GoalSet,
    cfg: &'a SharedControlConfig,
    weights: Vec<ArbitrationWeights>,
}

impl<'a> SharedControlCost<'a> {
    pub fn new(reference: &'a ReferenceTrajectory, goals: &'a GoalSet, cfg: &'a SharedControlConfig) -> Self {
        let weights = reference.positions.iter().map(|x| arbitration(x, goals, cfg)).collect();
        Self {
            reference,
            goals,
            cfg,
            weights,
        }
    }

    pub fn weights(&self) -> &[ArbitrationWeights] {
        &self.weights
    }
}

impl TrajectoryCost for SharedControlCost<'_> {
    fn refresh(&mut self, states: &[Vec6]) {
        self.weights = states.iter().map(|x| arbitration(x, self.goals, self.cfg)).collect();
    }

    fn stage(&self, k: usize, x: &Vec6, u: &Vec6) -> f64 {
        let r = self.reference;
        stage_cost_frozen(
            x,
            u,
            &r.positions[k],
            &r.velocities[k],
            self.goals,
            self.cfg,
            &self.weights[k],
        )
        .total
    }

    fn stage_derivatives(&self, k: usize, x: &Vec6, u: &Vec6) -> StageDerivatives {
        let r = self.reference;
        let d = cost_derivatives_frozen(
            x,
            u,
            &r.positions[k],
            &r.velocities[k],
            self.goals,
            self.cfg,
            &self.weights[k],
        );
        StageDerivatives {
            lx: d.grad_x(),
            lu: d.grad_u(),
            lxx: d.hessian.fixed_view::<6, 6>(0, 0).into_owned(),
            luu: d.hessian.fixed_view::<6, 6>(6, 6).into_owned(),
        }
    }

    fn terminal(&self, x: &Vec6) -> f64 {
        let n = self.reference.horizon();
        let (tracking, goal) =
            state_cost_frozen(x, &self.reference.positions[n], self.goals, self.cfg, &self.weights[n]);
        tracking + goal
    }

    fn terminal_derivatives(&self, x: &Vec6) -> (Vec6, Mat6) {
        let n = self.reference.horizon();
        state_derivatives_frozen(x, &self.reference.positions[n], self.goals, self.cfg, &self.weights[n])
    }

    fn initial_controls(&self, horizon: usize) -> Vec<Vec6> {
        (0..horizon)
            .map(|k| self.reference.velocities.get(k).copied().unwrap_or_else(Vec6::zeros))
            .collect()
    }

    fn exact_total(&self, states: &[Vec6], controls: &[Vec6]) -> f64 {
        let r = self.reference;
        let mut total = 0.0;
        for (k, u) in controls.iter().enumerate() {
            total += stage_cost(&states[k], u, &r.positions[k], &r.velocities[k], self.goals, self.cfg).total;
        }
        let n = controls.len();
        let w = arbitration(&states[n], self.goals, self.cfg);
        let (tracking, goal) = state_cost_frozen(&states[n], &r.positions[n], self.goals, self.cfg, &w);
        total + tracking + goal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    pub constraint_tolerance: f64,
    /// Relative tolerance on the expected decrease of the inner loop.
    pub cost_tolerance: f64,
    pub line_search_factor: f64,
    pub min_step: f64,
    pub armijo: f64,
    pub regularization_min: f64,
    pub regularization_max: f64,
    pub regularization_growth: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer_iterations: 30,
            max_inner_iterations: 50,
            penalty_initial: 1.0,
            penalty_growth: 10.0,
            penalty_max: 1e10,
            constraint_tolerance: 1e-5,
            cost_tolerance: 1e-10,
            line_search_factor: 0.5,
            min_step: 1e-4,
            armijo: 1e-4,
            regularization_min: 1e-8,
            regularization_max: 1e8,
            regularization_growth: 10.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.penalty_initial,
            self.penalty_max,
            self.constraint_tolerance,
            self.cost_tolerance,
            self.min_step,
            self.regularization_min,
            self.regularization_max,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.max_outer_iterations == 0 || self.max_inner_iterations == 0 {
            return Err(crate::Error::InvalidConfig("solver settings must be positive".into()));
        }
        if !(self.penalty_growth > 1.0) || !(self.regularization_growth > 1.0) {
            return Err(crate::Error::InvalidConfig("growth factors must exceed 1".into()));
        }
        if !(self.line_search_factor > 0.0 && self.line_search_factor < 1.0) {
            return Err(crate::Error::InvalidConfig(
                "line search factor must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Multipliers indexed `[stage][constraint]`. State constraints use stages
/// `1..=N`, control constraints `0..N`; the unused slots stay zero.
pub type Multipliers = Vec<Vec<DVector<f64>>>;

#[derive(Clone, Debug, Default)]
pub struct WarmStart {
    pub controls: Vec<Vec6>,
    pub multipliers: Option<Multipliers>,
    /// Penalty to resume from; used only together with multipliers.
    pub penalty: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    IterationLimit,
    Diverged,
}

#[derive(Clone, Debug)]
pub struct OcpSolution {
    pub states: Vec<Vec6>,
    pub controls: Vec<Vec6>,
    pub multipliers: Multipliers,
    pub penalty: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub max_violation: f64,
    /// Max violation after each outer iteration.
    pub violation_history: Vec<f64>,
    /// Merit before and after each accepted step, at the weights and
    /// multipliers in force for that step.
    pub accepted_steps: Vec<(f64, f64)>,
    pub cost: f64,
    pub status: SolveStatus,
}

impl OcpSolution {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// Controls and multipliers advanced by one stage, last entry repeated.
    pub fn shifted_warm_start(&self) -> WarmStart {
        fn shift<T: Clone>(v: &[T]) -> Vec<T> {
            let mut out: Vec<T> = v.iter().skip(1).cloned().collect();
            if let Some(last) = v.last() {
                out.push(last.clone());
            }
            out
        }
        WarmStart {
            controls: shift(&self.controls),
            multipliers: Some(shift(&self.multipliers)),
            penalty: Some(self.penalty),
        }
    }
}

/// One optimal control problem with the point-mass dynamics.
pub struct OcProblem<'a, C: TrajectoryCost> {
    pub x0: Vec6,
    pub delta: f64,
    pub horizon: usize,
    pub cost: C,
    pub constraints: &'a ConstraintSet,
}

pub fn rollout(x0: &Vec6, controls: &[Vec6], delta: f64) -> Vec<Vec6> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*x0);
    for (k, u) in controls.iter().enumerate() {
        let next = states[k] + u * delta;
        states.push(next);
    }
    states
}

fn applies_at(c: &Constraint, k: usize, horizon: usize) -> bool {
    match c.argument() {
        Argument::State => k >= 1 && k <= horizon,
        Argument::Control => k < horizon,
    }
}

/// Augmented-Lagrangian contribution of one constraint: value, gradient and
/// Gauss-Newton Hessian with respect to its argument.
fn al_terms(
    c: &Constraint,
    k: usize,
    v: &Vec6,
    lambda: &DVector<f64>,
    mu: f64,
    want_derivatives: bool,
) -> (f64, Vec6, Mat6) {
    let r = c.evaluate(k, v);
    let mut value = 0.0;
    let mut g = DVector::zeros(r.len());
    let mut h = DVector::zeros(r.len());
    for i in 0..r.len() {
        match c.kind {
            ConstraintKind::Equality => {
                value += lambda[i] * r[i] + 0.5 * mu * r[i] * r[i];
                g[i] = lambda[i] + mu * r[i];
                h[i] = mu;
            }
            ConstraintKind::Inequality => {
                let t = lambda[i] + mu * r[i];
                if t > 0.0 {
                    value += (t * t - lambda[i] * lambda[i]) / (2.0 * mu);
                    g[i] = t;
                    h[i] = mu;
                } else {
                    value -= lambda[i] * lambda[i] / (2.0 * mu);
                }
            }
        }
    }
    if !want_derivatives {
        return (value, Vec6::zeros(), Mat6::zeros());
    }
    let j: DMatrix<f64> = c.jacobian(k, v);
    let grad = j.transpose() * &g;
    let hess = j.transpose() * DMatrix::from_diagonal(&h) * &j;
    (
        value,
        Vec6::from_column_slice(grad.as_slice()),
        Mat6::from_column_slice(hess.as_slice()),
    )
}

struct AlState<'a> {
    constraints: &'a ConstraintSet,
    horizon: usize,
    lambda: Multipliers,
    mu: f64,
}

impl<'a> AlState<'a> {
    fn new(constraints: &'a ConstraintSet, horizon: usize, mu: f64, warm: Option<&WarmStart>) -> Self {
        let fresh: Multipliers = (0..=horizon)
            .map(|_| constraints.iter().map(|c| DVector::zeros(c.dim())).collect())
            .collect();
        let (lambda, mu) = match warm.and_then(|w| w.multipliers.as_ref().map(|m| (m, w.penalty))) {
            Some((m, penalty)) if Self::compatible(constraints, horizon, m) => {
                (m.clone(), penalty.filter(|p| p.is_finite() && *p >= mu).unwrap_or(mu))
            }
            _ => (fresh, mu),
        };
        Self {
            constraints,
            horizon,
            lambda,
            mu,
        }
    }

    fn compatible(constraints: &ConstraintSet, horizon: usize, m: &Multipliers) -> bool {
        m.len() == horizon + 1
            && m.iter().all(|stage| {
                stage.len() == constraints.len()
                    && stage.iter().zip(constraints.iter()).all(|(l, c)| l.len() == c.dim())
            })
    }

    /// AL value and derivatives summed over the constraints reading `x_k`
    /// (`arg = State`) or `u_k` (`arg = Control`).
    fn stage_terms(&self, k: usize, arg: Argument, v: &Vec6, derivatives: bool) -> (f64, Vec6, Mat6) {
        let mut value = 0.0;
        let mut grad = Vec6::zeros();
        let mut hess = Mat6::zeros();
        for (ci, c) in self.constraints.iter().enumerate() {
            if c.argument() != arg || !applies_at(c, k, self.horizon) {
                continue;
            }
            let (v_c, g_c, h_c) = al_terms(c, k, v, &self.lambda[k][ci], self.mu, derivatives);
            value += v_c;
            if derivatives {
                grad += g_c;
                hess += h_c;
            }
        }
        (value, grad, hess)
    }

    fn update_multipliers(&mut self, states: &[Vec6], controls: &[Vec6]) {
        for k in 0..=self.horizon {
            for (ci, c) in self.constraints.iter().enumerate() {
                if !applies_at(c, k, self.horizon) {
                    continue;
                }
                let v = match c.argument() {
                    Argument::State => &states[k],
                    Argument::Control => &controls[k],
                };
                let r = c.evaluate(k, v);
                let lambda = &mut self.lambda[k][ci];
                for i in 0..r.len() {
                    let updated = lambda[i] + self.mu * r[i];
                    lambda[i] = match c.kind {
                        ConstraintKind::Equality => updated,
                        ConstraintKind::Inequality => updated.max(0.0),
                    };
                }
            }
        }
    }
}

fn merit<C: TrajectoryCost>(cost: &C, al: &AlState, states: &[Vec6], controls: &[Vec6]) -> f64 {
    let n = controls.len();
    let mut total = cost.terminal(&states[n]) + al.stage_terms(n, Argument::State, &states[n], false).0;
    for k in 0..n {
        total += cost.stage(k, &states[k], &controls[k]);
        total += al.stage_terms(k, Argument::Control, &controls[k], false).0;
        if k >= 1 {
            total += al.stage_terms(k, Argument::State, &states[k], false).0;
        }
    }
    total
}

struct Gains {
    feedback: Vec<Mat6>,
    feedforward: Vec<Vec6>,
    /// Linear and quadratic coefficients of the expected merit change.
    expected: (f64, f64),
}

fn backward_pass<C: TrajectoryCost>(
    cost: &C,
    al: &AlState,
    states: &[Vec6],
    controls: &[Vec6],
    delta: f64,
    regularization: f64,
) -> Option<Gains> {
    let n = controls.len();
    let (mut vx, mut vxx) = cost.terminal_derivatives(&states[n]);
    let (_, gx, hx) = al.stage_terms(n, Argument::State, &states[n], true);
    vx += gx;
    vxx += hx;

    let mut feedback = vec![Mat6::zeros(); n];
    let mut feedforward = vec![Vec6::zeros(); n];
    let mut expected = (0.0, 0.0);

    for k in (0..n).rev() {
        let mut d = cost.stage_derivatives(k, &states[k], &controls[k]);
        if k >= 1 {
            let (_, gx, hx) = al.stage_terms(k, Argument::State, &states[k], true);
            d.lx += gx;
            d.lxx += hx;
        }
        let (_, gu, hu) = al.stage_terms(k, Argument::Control, &controls[k], true);
        d.lu += gu;
        d.luu += hu;

        // A = I, B = δI.
        let qx = d.lx + vx;
        let qu = d.lu + vx * delta;
        let qxx = d.lxx + vxx;
        let quu = d.luu + vxx * (delta * delta);
        let qux = vxx * delta;

        let quu_reg = quu + Mat6::identity() * regularization;
        let chol = quu_reg.cholesky()?;
        let gain_k = -chol.solve(&qux);
        let gain_d = -chol.solve(&qu);

        vx = qx + gain_k.transpose() * quu * gain_d + gain_k.transpose() * qu + qux.transpose() * gain_d;
        let v = qxx + gain_k.transpose() * quu * gain_k + gain_k.transpose() * qux + qux.transpose() * gain_k;
        vxx = (v + v.transpose()) * 0.5;

        expected.0 += gain_d.dot(&qu);
        expected.1 += 0.5 * gain_d.dot(&(quu * gain_d));
        feedback[k] = gain_k;
        feedforward[k] = gain_d;
    }
    Some(Gains {
        feedback,
        feedforward,
        expected,
    })
}

fn forward_pass(
    x0: &Vec6,
    states: &[Vec6],
    controls: &[Vec6],
    gains: &Gains,
    step: f64,
    delta: f64,
) -> (Vec<Vec6>, Vec<Vec6>) {
    let n = controls.len();
    let mut xs = Vec::with_capacity(n + 1);
    let mut us = Vec::with_capacity(n);
    xs.push(*x0);
    for k in 0..n {
        let u = controls[k] + gains.feedforward[k] * step + gains.feedback[k] * (xs[k] - states[k]);
        let next = xs[k] + u * delta;
        us.push(u);
        xs.push(next);
    }
    (xs, us)
}

/// Solve the constrained problem. A warm start with the wrong horizon or
/// multiplier layout is ignored.
pub fn solve<C: TrajectoryCost>(
    mut problem: OcProblem<'_, C>,
    cfg: &SolverConfig,
    warm_start: Option<&WarmStart>,
) -> OcpSolution {
    let n = problem.horizon;
    let delta = problem.delta;
    let mut controls = match warm_start {
        Some(w) if w.controls.len() == n => w.controls.clone(),
        _ => problem.cost.initial_controls(n),
    };
    let mut states = rollout(&problem.x0, &controls, delta);
    let mut al = AlState::new(problem.constraints, n, cfg.penalty_initial, warm_start);

    let mut regularization = 0.0;
    let mut inner_total = 0;
    let mut outer = 0;
    let mut history = Vec::new();
    let mut accepted_steps = Vec::new();
    let mut status = SolveStatus::IterationLimit;

    'outer: while outer < cfg.max_outer_iterations {
        outer += 1;
        let mut inner_converged = false;
        for _ in 0..cfg.max_inner_iterations {
            inner_total += 1;
            problem.cost.refresh(&states);
            let current = merit(&problem.cost, &al, &states, &controls);
            if !current.is_finite() {
                status = SolveStatus::Diverged;
                break 'outer;
            }

            let gains = loop {
                match backward_pass(&problem.cost, &al, &states, &controls, delta, regularization) {
                    Some(g) => break Some(g),
                    None => {
                        regularization = (regularization * cfg.regularization_growth).max(cfg.regularization_min);
                        if regularization > cfg.regularization_max {
                            break None;
                        }
                    }
                }
            };
            let Some(gains) = gains else {
                status = SolveStatus::Diverged;
                break 'outer;
            };

            let expected_full = -(gains.expected.0 + gains.expected.1);
            if expected_full <= cfg.cost_tolerance * (1.0 + current.abs()) {
                inner_converged = true;
                break;
            }

            let mut step = 1.0;
            let mut accepted = None;
            while step >= cfg.min_step {
                let (xs, us) = forward_pass(&problem.x0, &states, &controls, &gains, step, delta);
                let candidate = merit(&problem.cost, &al, &xs, &us);
                let expected = -(step * gains.expected.0 + step * step * gains.expected.1);
                if candidate.is_finite() && candidate <= current && current - candidate >= cfg.armijo * expected {
                    accepted = Some((xs, us, candidate));
                    break;
                }
                step *= cfg.line_search_factor;
            }

            match accepted {
                Some((xs, us, candidate)) => {
                    debug!(
                        target: "alilqr",
                        "outer={outer} inner={inner_total} merit={candidate:.6e} step={step:.3e} reg={regularization:.1e} mu={:.1e}",
                        al.mu
                    );
                    accepted_steps.push((current, candidate));
                    states = xs;
                    controls = us;
                    regularization = if regularization > cfg.regularization_min {
                        regularization / cfg.regularization_growth
                    } else {
                        0.0
                    };
                }
                None => {
                    regularization = (regularization * cfg.regularization_growth).max(cfg.regularization_min);
                    if regularization > cfg.regularization_max {
                        break;
                    }
                }
            }
        }

        let violation = problem.constraints.max_violation(&states, &controls);
        history.push(violation);
        debug!(target: "alilqr", "outer={outer} violation={violation:.3e} mu={:.1e}", al.mu);
        if violation <= cfg.constraint_tolerance {
            if inner_converged {
                status = SolveStatus::Converged;
                break;
            }
        } else {
            al.update_multipliers(&states, &controls);
            al.mu = (al.mu * cfg.penalty_growth).min(cfg.penalty_max);
        }
    }

    let max_violation = problem.constraints.max_violation(&states, &controls);
    let cost = problem.cost.exact_total(&states, &controls);
    if !cost.is_finite() {
        status = SolveStatus::Diverged;
    }
    OcpSolution {
        states,
        controls,
        multipliers: al.lambda,
        penalty: al.mu,
        outer_iterations: outer,
        inner_iterations: inner_total,
        max_violation,
        violation_history: history,
        accepted_steps,
        cost,
        status,
    }
}

/// Everything a receding-horizon step needs besides the state and reference.
#[derive(Clone, Copy)]
pub struct MpcContext<'a> {
    pub world: &'a World,
    pub goals: &'a GoalSet,
    pub mode: &'a GraspMode,
    pub coupling: Option<&'a CouplingContext>,
    pub shared: &'a SharedControlConfig,
    pub solver: &'a SolverConfig,
}

#[derive(Clone, Debug)]
pub struct MpcStep {
    /// Position to command next: `states[1]` of the solution, or the current
    /// position when the solve failed.
    pub waypoint: Vec6,
    pub solution: OcpSolution,
    pub failed: bool,
}

/// Solve over the horizon from `current` and keep only the first step.
pub fn mpc_step(
    current: &ArmPair,
    reference: &ReferenceTrajectory,
    ctx: &MpcContext<'_>,
    previous: Option<&OcpSolution>,
) -> Result<MpcStep> {
    let constraints = assemble(ctx.world, ctx.mode, ctx.shared, ctx.coupling)?;
    let warm = previous.map(OcpSolution::shifted_warm_start);
    let problem = OcProblem {
        x0: current.stacked(),
        delta: ctx.shared.delta(),
        horizon: reference.horizon(),
        cost: SharedControlCost::new(reference, ctx.goals, ctx.shared),
        constraints: &constraints,
    };
    let solution = solve(problem, ctx.solver, warm.as_ref());
    let failed = !solution.converged();
    let waypoint = if failed { current.stacked() } else { solution.states[1] };
    Ok(MpcStep {
        waypoint,
        solution,
        failed,
    })
}
