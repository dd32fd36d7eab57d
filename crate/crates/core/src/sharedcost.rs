//! Blended teleoperation/assistance stage cost.
//!
//! The stage cost is
//!
//! ```text
//! (x - x_d)ᵀ K_min Q (x - x_d) + (u - u_d)ᵀ R (u - u_d)
//!     + Σ_j (F_j (x - g_j))ᵀ (I - K_j) P_j (F_j (x - g_j))
//! ```
//!
//! where `K_j = blkdiag(w(g_j, x_L) I₃, w(g_j, x_R) I₃)`, `F_j` is the
//! block-diagonal goal frame rotation and `w` is a sigmoid of the
//! effector-goal distance. Far from every goal `K ≈ I` and the cost reduces
//! to tracking the operator; close to a goal tracking fades out and the goal
//! term takes over.

use nalgebra::{Matrix3, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::worldmodel::{arm_slice, Arm, Goal, GoalSet, Mat6, SharedControlConfig, Vec3, Vec6};

pub type Vec12 = SVector<f64, 12>;
pub type Mat12 = SMatrix<f64, 12, 12>;

/// `1 / (1 + exp(β - α‖t - p‖))`.
pub fn sigmoid_weight(target: &Vec3, position: &Vec3, alpha_w: f64, beta_w: f64) -> f64 {
    sigmoid_of_distance((target - position).norm(), alpha_w, beta_w)
}

pub fn sigmoid_of_distance(distance: f64, alpha_w: f64, beta_w: f64) -> f64 {
    let z = alpha_w * distance - beta_w;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Scalar weights for the left and right blocks of a block-isotropic 6×6.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub left: f64,
    pub right: f64,
}

impl BlockWeights {
    pub fn identity() -> Self {
        Self { left: 1.0, right: 1.0 }
    }

    pub fn get(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Left => self.left,
            Arm::Right => self.right,
        }
    }

    pub fn as_matrix(&self) -> Mat6 {
        let mut d = Vec6::zeros();
        for i in 0..3 {
            d[i] = self.left;
            d[i + 3] = self.right;
        }
        Mat6::from_diagonal(&d)
    }

    fn diagonal(&self) -> Vec6 {
        Vec6::new(self.left, self.left, self.left, self.right, self.right, self.right)
    }
}

/// Arbitration for one goal: its `K_j` blocks and which arms it attracts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalWeights {
    pub k: BlockWeights,
    pub left_active: bool,
    pub right_active: bool,
}

impl GoalWeights {
    pub fn active(&self, arm: Arm) -> bool {
        match arm {
            Arm::Left => self.left_active,
            Arm::Right => self.right_active,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArbitrationWeights {
    pub per_goal: Vec<GoalWeights>,
    pub k_min: BlockWeights,
}

impl ArbitrationWeights {
    /// Pure teleoperation: no goals, `K_min = I`.
    pub fn teleoperation() -> Self {
        Self {
            per_goal: Vec::new(),
            k_min: BlockWeights::identity(),
        }
    }
}

/// `K_j` for every goal at the stacked position `x`, and `K_min` as the
/// per-block minimum over the goals that attract each arm.
pub fn arbitration(x: &Vec6, goals: &GoalSet, cfg: &SharedControlConfig) -> ArbitrationWeights {
    if !cfg.assist() {
        return ArbitrationWeights::teleoperation();
    }
    let left = arm_slice(x, Arm::Left);
    let right = arm_slice(x, Arm::Right);
    let mask = cfg.mask_foreign_goals();
    let mut k_min = BlockWeights::identity();
    let per_goal = goals
        .iter()
        .map(|goal| {
            let k = BlockWeights {
                left: sigmoid_weight(&goal.position, &left, cfg.alpha_w(), cfg.beta_w()),
                right: sigmoid_weight(&goal.position, &right, cfg.alpha_w(), cfg.beta_w()),
            };
            let left_active = goal.applies_to(Arm::Left, mask);
            let right_active = goal.applies_to(Arm::Right, mask);
            if left_active {
                k_min.left = k_min.left.min(k.left);
            }
            if right_active {
                k_min.right = k_min.right.min(k.right);
            }
            GoalWeights {
                k,
                left_active,
                right_active,
            }
        })
        .collect();
    ArbitrationWeights { per_goal, k_min }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCostTerms {
    pub tracking: f64,
    pub goal: f64,
    pub control: f64,
    pub total: f64,
}

/// The goal's 3×3 weight in the base frame for one arm, `(1 - w) Fᵀ P F`,
/// or zero when the goal does not attract that arm.
fn goal_block(goal: &Goal, weights: &GoalWeights, arm: Arm) -> Matrix3<f64> {
    if !weights.active(arm) {
        return Matrix3::zeros();
    }
    let f = goal.frame.matrix();
    let p = Matrix3::from_diagonal(&goal.approach_weights);
    f.transpose() * p * f * (1.0 - weights.k.get(arm))
}

fn tracking_diagonal(weights: &ArbitrationWeights, cfg: &SharedControlConfig) -> Vec6 {
    weights.k_min.diagonal().component_mul(&cfg.q_diag())
}

/// State-only part of the stage cost (tracking and goal terms), with the
/// arbitration weights held fixed.
pub fn state_cost_frozen(
    x: &Vec6,
    xd: &Vec6,
    goals: &GoalSet,
    cfg: &SharedControlConfig,
    weights: &ArbitrationWeights,
) -> (f64, f64) {
    let e = x - xd;
    let tracking = e.component_mul(&tracking_diagonal(weights, cfg)).dot(&e);
    let mut goal_term = 0.0;
    for (goal, gw) in goals.iter().zip(&weights.per_goal) {
        for arm in Arm::BOTH {
            let d = arm_slice(x, arm) - goal.position;
            goal_term += d.dot(&(goal_block(goal, gw, arm) * d));
        }
    }
    (tracking, goal_term)
}

/// Stage cost with the arbitration weights held fixed at `weights`.
pub fn stage_cost_frozen(
    x: &Vec6,
    u: &Vec6,
    xd: &Vec6,
    ud: &Vec6,
    goals: &GoalSet,
    cfg: &SharedControlConfig,
    weights: &ArbitrationWeights,
) -> StageCostTerms {
    let (tracking, goal) = state_cost_frozen(x, xd, goals, cfg, weights);
    let du = u - ud;
    let control = du.component_mul(&cfg.r_diag()).dot(&du);
    StageCostTerms {
        tracking,
        goal,
        control,
        total: tracking + control + goal,
    }
}

/// Stage cost with weights evaluated at `x`.
pub fn stage_cost(
    x: &Vec6,
    u: &Vec6,
    xd: &Vec6,
    ud: &Vec6,
    goals: &GoalSet,
    cfg: &SharedControlConfig,
) -> StageCostTerms {
    let weights = arbitration(x, goals, cfg);
    stage_cost_frozen(x, u, xd, ud, goals, cfg, &weights)
}

/// Gradient and Gauss-Newton Hessian of the state part at fixed weights.
pub fn state_derivatives_frozen(
    x: &Vec6,
    xd: &Vec6,
    goals: &GoalSet,
    cfg: &SharedControlConfig,
    weights: &ArbitrationWeights,
) -> (Vec6, Mat6) {
    let tq = tracking_diagonal(weights, cfg);
    let mut gradient = (x - xd).component_mul(&tq) * 2.0;
    let mut hessian = Mat6::from_diagonal(&(tq * 2.0));
    for (goal, gw) in goals.iter().zip(&weights.per_goal) {
        for arm in Arm::BOTH {
            let block = goal_block(goal, gw, arm);
            let d = arm_slice(x, arm) - goal.position;
            let o = arm.offset();
            let g = block * d * 2.0;
            for i in 0..3 {
                gradient[o + i] += g[i];
            }
            let mut h = hessian.fixed_view_mut::<3, 3>(o, o);
            h += block * 2.0;
        }
    }
    (gradient, hessian)
}

/// Derivatives of the stage cost with respect to `[x; u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostDerivatives {
    pub gradient: Vec12,
    pub hessian: Mat12,
}

impl CostDerivatives {
    pub fn grad_x(&self) -> Vec6 {
        self.gradient.fixed_rows::<6>(0).into_owned()
    }

    pub fn grad_u(&self) -> Vec6 {
        self.gradient.fixed_rows::<6>(6).into_owned()
    }
}

/// Stage cost derivatives with `K` frozen at `weights` (Gauss-Newton).
pub fn cost_derivatives_frozen(
    x: &Vec6,
    u: &Vec6,
    xd: &Vec6,
    ud: &Vec6,
    goals: &GoalSet,
    cfg: &SharedControlConfig,
    weights: &ArbitrationWeights,
) -> CostDerivatives {
    let (gx, hxx) = state_derivatives_frozen(x, xd, goals, cfg, weights);
    let r = cfg.r_diag();
    let gu = (u - ud).component_mul(&r) * 2.0;
    let mut gradient = Vec12::zeros();
    gradient.fixed_rows_mut::<6>(0).copy_from(&gx);
    gradient.fixed_rows_mut::<6>(6).copy_from(&gu);
    let mut hessian = Mat12::zeros();
    hessian.fixed_view_mut::<6, 6>(0, 0).copy_from(&hxx);
    hessian
        .fixed_view_mut::<6, 6>(6, 6)
        .copy_from(&Mat6::from_diagonal(&(r * 2.0)));
    CostDerivatives { gradient, hessian }
}

/// Stage cost derivatives with `K` frozen at its value at `x`.
pub fn cost_derivatives(
    x: &Vec6,
    u: &Vec6,
    xd: &Vec6,
    ud: &Vec6,
    goals: &GoalSet,
    cfg: &SharedControlConfig,
) -> CostDerivatives {
    let weights = arbitration(x, goals, cfg);
    cost_derivatives_frozen(x, u, xd, ud, goals, cfg, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldmodel::{stack, Rot3, SharedControlParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg_with(alpha: f64, beta: f64, q: f64, r: f64) -> SharedControlConfig {
        SharedControlConfig::new(SharedControlParams {
            alpha_w: alpha,
            beta_w: beta,
            q_diag: [q; 6],
            r_diag: [r; 6],
            mask_foreign_goals: false,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn sigmoid_midpoint_and_saturation() {
        let (a, b) = (10.0, 4.0);
        let w = sigmoid_weight(&Vec3::new(b / a, 0.0, 0.0), &Vec3::zeros(), a, b);
        assert!((w - 0.5).abs() < 1e-12);
        let far = sigmoid_weight(&Vec3::new(5.0, 0.0, 0.0), &Vec3::zeros(), a, b);
        assert!((far - 1.0).abs() < 1e-12);
        let at_goal = sigmoid_weight(&Vec3::zeros(), &Vec3::zeros(), a, 4.0);
        assert!((at_goal - 1.0 / (1.0 + 4f64.exp())).abs() < 1e-15);
        assert!((at_goal - 0.017_986).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_is_increasing() {
        let mut prev = 0.0;
        for i in 0..1000 {
            let w = sigmoid_of_distance(i as f64 * 1e-3, 40.0, 4.0);
            assert!(w >= prev && w <= 1.0);
            // Strict until the weight saturates in f64.
            if i < 500 {
                assert!(w > prev);
            }
            prev = w;
        }
    }

    #[test]
    fn empty_goals_give_identity() {
        let cfg = SharedControlConfig::default();
        let k = arbitration(&Vec6::zeros(), &GoalSet::empty(), &cfg);
        assert!(k.per_goal.is_empty());
        assert_eq!(k.k_min.as_matrix(), Mat6::identity());
    }

    #[test]
    fn goal_near_left_only() {
        let cfg = cfg_with(10.0, 4.0, 1.0, 1.0);
        let left = Vec3::new(0.5, 0.2, 0.1);
        let right = Vec3::new(0.5, -5.0, 0.1);
        let goals = GoalSet::new(vec![Goal::at(left, "obj", None)]);
        let k = arbitration(&stack(&left, &right), &goals, &cfg);
        let w0 = 1.0 / (1.0 + 4f64.exp());
        assert!((k.k_min.left - w0).abs() < 1e-12);
        assert!((k.k_min.right - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_min_takes_nearest_goal() {
        let cfg = cfg_with(10.0, 4.0, 1.0, 1.0);
        let x = Vec6::zeros();
        let goals = GoalSet::new(vec![
            Goal::at(Vec3::new(0.5, 0.0, 0.0), "far", None),
            Goal::at(Vec3::new(0.2, 0.0, 0.0), "near", None),
        ]);
        let k = arbitration(&x, &goals, &cfg);
        assert_eq!(k.k_min.left, sigmoid_of_distance(0.2, 10.0, 4.0));
        for g in &k.per_goal {
            assert!(k.k_min.left <= g.k.left && k.k_min.right <= g.k.right);
        }
    }

    #[test]
    fn masked_goal_is_ignored_by_other_arm() {
        let cfg = SharedControlConfig::default();
        let goals = GoalSet::new(vec![Goal::at(Vec3::zeros(), "obj", Some(Arm::Left))]);
        let x = Vec6::zeros();
        let k = arbitration(&x, &goals, &cfg);
        assert!(k.k_min.left < 0.1);
        assert_eq!(k.k_min.right, 1.0);
        let xd = Vec6::repeat(0.01);
        let terms = stage_cost(&x, &Vec6::zeros(), &xd, &Vec6::zeros(), &goals, &cfg);
        assert!(terms.goal == 0.0);
    }

    #[test]
    fn far_goal_pure_tracking() {
        let cfg = cfg_with(10.0, 4.0, 1.0, 1.0);
        let x = Vec6::new(0.1, 0.2, 0.3, -0.1, 0.2, 0.3);
        let goals = GoalSet::new(vec![Goal::at(Vec3::new(1e6, 0.0, 0.0), "far", None)]);
        let t = stage_cost(&x, &Vec6::zeros(), &x, &Vec6::zeros(), &goals, &cfg);
        assert!(t.total < 1e-8);
    }

    #[test]
    fn at_goal_goal_term_vanishes() {
        let cfg = cfg_with(10.0, 4.0, 2.0, 1.0);
        let g = Vec3::new(0.79, 0.1, 0.25);
        let x = stack(&g, &g);
        let xd = x + Vec6::new(0.01, -0.02, 0.0, 0.03, 0.0, 0.01);
        let goals = GoalSet::new(vec![Goal::at(g, "obj", None)]);
        let t = stage_cost(&x, &Vec6::zeros(), &xd, &Vec6::zeros(), &goals, &cfg);
        assert_eq!(t.goal, 0.0);
        let w0 = sigmoid_of_distance(0.0, 10.0, 4.0);
        let expected = w0 * 2.0 * (x - xd).norm_squared();
        assert!((t.tracking - expected).abs() < 1e-15);
        assert_eq!(t.control, 0.0);
    }

    #[test]
    fn midpoint_distance_halves_both_terms() {
        let (a, b) = (10.0, 4.0);
        let cfg = cfg_with(a, b, 1.0, 1.0);
        let g = Vec3::new(0.5, 0.0, 0.2);
        let dir_l = Vec3::new(0.0, 1.0, 0.0);
        let dir_r = Vec3::new(0.6, 0.0, 0.8);
        let x = stack(&(g + dir_l * (b / a)), &(g + dir_r * (b / a)));
        let xd = x + Vec6::new(0.1, 0.0, -0.2, 0.0, 0.3, 0.0);
        let goals = GoalSet::new(vec![Goal::at(g, "obj", None)]);
        let t = stage_cost(&x, &Vec6::zeros(), &xd, &Vec6::zeros(), &goals, &cfg);
        // Hand-substituted w = 0.5 with Q = P = I.
        let tracking = 0.5 * (x - xd).norm_squared();
        let goal = 0.5 * (x - stack(&g, &g)).norm_squared();
        assert!((t.tracking - tracking).abs() < 1e-12);
        assert!((t.goal - goal).abs() < 1e-12);
    }

    #[test]
    fn no_goals_is_pure_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SharedControlConfig::default();
        for _ in 0..100 {
            let x = Vec6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let xd = Vec6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let u = Vec6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let ud = Vec6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let t = stage_cost(&x, &u, &xd, &ud, &GoalSet::empty(), &cfg);
            let quad = (x - xd).component_mul(&cfg.q_diag()).dot(&(x - xd))
                + (u - ud).component_mul(&cfg.r_diag()).dot(&(u - ud));
            assert!((t.total - quad).abs() < 1e-12);
            assert_eq!(t.goal, 0.0);
        }
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Rot3 {
        Rot3::rot_z(rng.random_range(-3.0..3.0))
            * Rot3::rot_y(rng.random_range(-3.0..3.0))
            * Rot3::rot_x(rng.random_range(-3.0..3.0))
    }

    #[test]
    fn goal_term_is_frame_congruent() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = cfg_with(8.0, 3.0, 1.0, 1.0);
        for _ in 0..100 {
            let frame = random_rotation(&mut rng);
            let weights = Vec3::from_fn(|_, _| rng.random_range(0.1..5.0));
            let g = Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5));
            let goal = Goal::new(g, frame, "o", weights, None).unwrap();
            let x = Vec6::from_fn(|_, _| rng.random_range(-0.6..0.6));
            let goals = GoalSet::new(vec![goal]);
            let t = stage_cost(&x, &Vec6::zeros(), &x, &Vec6::zeros(), &goals, &cfg);
            // Same quadratic with identity frame and the weight re-expressed
            // in the base frame.
            let f = frame.matrix();
            let p_base = f.transpose() * Matrix3::from_diagonal(&weights) * f;
            let mut expected = 0.0;
            for arm in Arm::BOTH {
                let d = arm_slice(&x, arm) - g;
                let w = sigmoid_weight(&g, &arm_slice(&x, arm), 8.0, 3.0);
                expected += (1.0 - w) * d.dot(&(p_base * d));
            }
            assert!((t.goal - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
            assert!(t.tracking >= 0.0 && t.goal >= 0.0 && t.control >= 0.0);
        }
    }

    #[test]
    fn control_gradient_zero_at_reference() {
        let cfg = SharedControlConfig::default();
        let ud = Vec6::repeat(0.1);
        let d = cost_derivatives(&Vec6::zeros(), &ud, &Vec6::zeros(), &ud, &GoalSet::empty(), &cfg);
        assert_eq!(d.grad_u(), Vec6::zeros());
    }

    #[test]
    fn no_goal_state_gradient() {
        let cfg = cfg_with(10.0, 4.0, 3.0, 1.0);
        let x = Vec6::new(0.1, 0.2, 0.3, 0.4, 0.5, 0.6);
        let xd = Vec6::repeat(0.2);
        let d = cost_derivatives(&x, &Vec6::zeros(), &xd, &Vec6::zeros(), &GoalSet::empty(), &cfg);
        assert!((d.grad_x() - (x - xd) * 6.0).norm() < 1e-15);
    }

    #[test]
    fn hessian_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = SharedControlConfig::default();
        for _ in 0..50 {
            let goals = GoalSet::new(vec![Goal::new(
                Vec3::from_fn(|_, _| rng.random_range(-0.3..0.3)),
                random_rotation(&mut rng),
                "o",
                Vec3::from_fn(|_, _| rng.random_range(0.1..3.0)),
                None,
            )
            .unwrap()]);
            let x = Vec6::from_fn(|_, _| rng.random_range(-0.3..0.3));
            let d = cost_derivatives(&x, &Vec6::zeros(), &x, &Vec6::zeros(), &goals, &cfg);
            assert!((d.hessian - d.hessian.transpose()).abs().max() < 1e-14);
            assert!(d.hessian.symmetric_eigenvalues().min() >= -1e-12);
        }
    }
}
