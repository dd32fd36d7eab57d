//! Constraint families for one planning solve.
//!
//! Every residual follows the sign convention `c <= 0` (inequalities) or
//! `h = 0` (equalities). State constraints apply to the states `x_1..x_N`
//! (the initial state is fixed), control constraints to `u_0..u_{N-1}`.

use nalgebra::{DMatrix, DVector, Matrix3};

use crate::error::{Error, Result};
use crate::worldmodel::{
    arm_slice, rot_z, Arm, EllipsoidObstacle, GraspMode, Plane, PlaneSet, Rot3, SharedControlConfig, Vec3, Vec6, World,
};

/// `b - aᵀ x_arm` for every plane and both arms, plane-major
/// (`[p0 left, p0 right, p1 left, ...]`).
pub fn plane_residuals(planes: &PlaneSet, x: &Vec6) -> DVector<f64> {
    DVector::from_iterator(
        planes.len() * 2,
        planes
            .rows
            .iter()
            .flat_map(|p| Arm::BOTH.map(|arm| p.offset - p.normal.dot(&arm_slice(x, arm)))),
    )
}

/// `margin - (p - c)ᵀ R M Rᵀ (p - c)`; positive inside the ellipsoid.
pub fn ellipsoid_residual(obs: &EllipsoidObstacle, p: &Vec3) -> f64 {
    obs.margin - obs.quadratic(p)
}

fn vec_rows(m: &Matrix3<f64>) -> [f64; 9] {
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ]
}

fn orientation_blocks(mode: &GraspMode, r_l: &Rot3, r_r: &Rot3, r_lo: &Rot3) -> Vec<(&'static str, [f64; 9])> {
    let id = Matrix3::identity();
    let operator = vec_rows(&(r_l.matrix().transpose() * r_lo.matrix() - id));
    match mode {
        GraspMode::Independent => Vec::new(),
        GraspMode::TopDownFront { .. } => vec![
            (
                "relative orientation",
                vec_rows(&(r_l.matrix().transpose() * r_r.matrix() - id)),
            ),
            ("operator orientation", operator),
        ],
        GraspMode::Side { .. } => vec![
            ("operator orientation", operator),
            (
                "opposed orientation",
                vec_rows(&(r_r.matrix().transpose() * r_l.matrix() - rot_z(std::f64::consts::PI).matrix())),
            ),
        ],
    }
}

/// Residuals of the coordinated-grasp equalities. Independent mode yields
/// an empty vector. Coordinated modes yield the left anchoring distance,
/// the right-relative-to-left distance, then two row-major 3×3 orientation
/// residual blocks.
pub fn coupling_residuals(
    mode: &GraspMode,
    x_l: &Vec3,
    x_r: &Vec3,
    r_l: &Rot3,
    r_r: &Rot3,
    r_lo: &Rot3,
    xd_l: &Vec3,
) -> DVector<f64> {
    let Some(offset) = mode.offset() else {
        return DVector::zeros(0);
    };
    let mut out = vec![(x_l - xd_l).norm(), (x_r - (x_l + r_l * offset)).norm()];
    for (_, block) in orientation_blocks(mode, r_l, r_r, r_lo) {
        out.extend_from_slice(&block);
    }
    DVector::from_vec(out)
}

/// `[u - u_max; u_min - u]`.
pub fn velocity_bound_residuals(u: &Vec6, cfg: &SharedControlConfig) -> DVector<f64> {
    let upper = u - cfg.u_max();
    let lower = cfg.u_min() - u;
    DVector::from_iterator(12, upper.iter().chain(lower.iter()).copied())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintKind {
    Inequality,
    Equality,
}

/// Which trajectory variable a constraint reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Argument {
    State,
    Control,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Residual {
    Plane {
        arm: Arm,
        plane: Plane,
    },
    Ellipsoid {
        arm: Arm,
        obstacle: EllipsoidObstacle,
    },
    VelocityBounds {
        lower: Vec6,
        upper: Vec6,
    },
    /// `x_L - target_k`, one target per state index.
    LeftAnchor {
        targets: Vec<Vec3>,
    },
    /// `x_R - x_L - offset`, with `offset` already rotated into the base frame.
    RelativePosition {
        offset: Vec3,
    },
    /// A residual that does not depend on the trajectory (orientation
    /// channel checks).
    Constant {
        values: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    pub label: String,
    pub kind: ConstraintKind,
    pub residual: Residual,
}

impl Constraint {
    pub fn argument(&self) -> Argument {
        match self.residual {
            Residual::VelocityBounds { .. } => Argument::Control,
            _ => Argument::State,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.residual {
            Residual::Plane { .. } | Residual::Ellipsoid { .. } => 1,
            Residual::VelocityBounds { .. } => 12,
            Residual::LeftAnchor { .. } | Residual::RelativePosition { .. } => 3,
            Residual::Constant { values } => values.len(),
        }
    }

    /// Residual at stage `k`, where `v` is `x_k` or `u_k` depending on
    /// [`Constraint::argument`].
    pub fn evaluate(&self, k: usize, v: &Vec6) -> DVector<f64> {
        match &self.residual {
            Residual::Plane { arm, plane } => {
                DVector::from_element(1, plane.offset - plane.normal.dot(&arm_slice(v, *arm)))
            }
            Residual::Ellipsoid { arm, obstacle } => {
                DVector::from_element(1, ellipsoid_residual(obstacle, &arm_slice(v, *arm)))
            }
            Residual::VelocityBounds { lower, upper } => {
                DVector::from_iterator(12, (v - upper).iter().chain((lower - v).iter()).copied())
            }
            Residual::LeftAnchor { targets } => {
                let target = targets[k.min(targets.len() - 1)];
                let r = arm_slice(v, Arm::Left) - target;
                DVector::from_column_slice(r.as_slice())
            }
            Residual::RelativePosition { offset } => {
                let r = arm_slice(v, Arm::Right) - arm_slice(v, Arm::Left) - offset;
                DVector::from_column_slice(r.as_slice())
            }
            Residual::Constant { values } => DVector::from_column_slice(values),
        }
    }

    /// Jacobian of [`Constraint::evaluate`] with respect to its argument
    /// (`dim × 6`).
    pub fn jacobian(&self, _k: usize, v: &Vec6) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.dim(), 6);
        match &self.residual {
            Residual::Plane { arm, plane } => {
                let o = arm.offset();
                for i in 0..3 {
                    j[(0, o + i)] = -plane.normal[i];
                }
            }
            Residual::Ellipsoid { arm, obstacle } => {
                let o = arm.offset();
                let d = arm_slice(v, *arm) - obstacle.center;
                let g = obstacle.shape_matrix() * d * -2.0;
                for i in 0..3 {
                    j[(0, o + i)] = g[i];
                }
            }
            Residual::VelocityBounds { .. } => {
                for i in 0..6 {
                    j[(i, i)] = 1.0;
                    j[(i + 6, i)] = -1.0;
                }
            }
            Residual::LeftAnchor { .. } => {
                for i in 0..3 {
                    j[(i, i)] = 1.0;
                }
            }
            Residual::RelativePosition { .. } => {
                for i in 0..3 {
                    j[(i, i)] = -1.0;
                    j[(i, i + 3)] = 1.0;
                }
            }
            Residual::Constant { .. } => {}
        }
        j
    }

    /// Violation of each row: `max(0, c)` or `|h|`.
    pub fn violation(&self, k: usize, v: &Vec6) -> f64 {
        let r = self.evaluate(k, v);
        match self.kind {
            ConstraintKind::Inequality => r.iter().fold(0.0, |m, c| m.max(*c)),
            ConstraintKind::Equality => r.iter().fold(0.0, |m, c| m.max(c.abs())),
        }
    }
}

/// Everything the coupling constraints need besides the positions.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingContext {
    pub left_orientation: Rot3,
    pub right_orientation: Rot3,
    pub operator_orientation: Rot3,
    /// Left reference position for each state index `0..=N`.
    pub left_reference: Vec<Vec3>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConstraintSet {
    pub constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<Constraint>) -> Self {
        Self { constraints }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Constraint> {
        self.constraints.iter()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    fn rows(&self, kind: ConstraintKind) -> usize {
        self.constraints
            .iter()
            .filter(|c| c.kind == kind)
            .map(Constraint::dim)
            .sum()
    }

    /// Scalar inequality rows per stage.
    pub fn inequality_rows(&self) -> usize {
        self.rows(ConstraintKind::Inequality)
    }

    /// Scalar equality rows per stage.
    pub fn equality_rows(&self) -> usize {
        self.rows(ConstraintKind::Equality)
    }

    /// Number of equality constraint blocks.
    pub fn equality_count(&self) -> usize {
        self.constraints
            .iter()
            .filter(|c| c.kind == ConstraintKind::Equality)
            .count()
    }

    /// Largest violation over states `1..=N` and controls `0..N`.
    pub fn max_violation(&self, states: &[Vec6], controls: &[Vec6]) -> f64 {
        let mut worst: f64 = 0.0;
        for c in &self.constraints {
            match c.argument() {
                Argument::State => {
                    for (k, x) in states.iter().enumerate().skip(1) {
                        worst = worst.max(c.violation(k, x));
                    }
                }
                Argument::Control => {
                    for (k, u) in controls.iter().enumerate() {
                        worst = worst.max(c.violation(k, u));
                    }
                }
            }
        }
        worst
    }
}

/// Build the constraint set for one solve. Coordinated modes need a
/// [`CouplingContext`].
pub fn assemble(
    world: &World,
    mode: &GraspMode,
    cfg: &SharedControlConfig,
    coupling: Option<&CouplingContext>,
) -> Result<ConstraintSet> {
    let mut constraints = Vec::new();
    for (i, plane) in world.planes.rows.iter().enumerate() {
        for arm in Arm::BOTH {
            constraints.push(Constraint {
                label: format!("plane[{i}].{arm}"),
                kind: ConstraintKind::Inequality,
                residual: Residual::Plane { arm, plane: *plane },
            });
        }
    }
    for (i, obstacle) in world.ellipsoids.iter().enumerate() {
        for arm in Arm::BOTH {
            constraints.push(Constraint {
                label: format!("ellipsoid[{i}].{arm}"),
                kind: ConstraintKind::Inequality,
                residual: Residual::Ellipsoid {
                    arm,
                    obstacle: obstacle.clone(),
                },
            });
        }
    }
    constraints.push(Constraint {
        label: "velocity bounds".into(),
        kind: ConstraintKind::Inequality,
        residual: Residual::VelocityBounds {
            lower: cfg.u_min(),
            upper: cfg.u_max(),
        },
    });

    if let Some(offset) = mode.offset() {
        let ctx = coupling.ok_or(Error::MissingCouplingContext)?;
        if ctx.left_reference.is_empty() {
            return Err(Error::MissingCouplingContext);
        }
        constraints.push(Constraint {
            label: "left anchor".into(),
            kind: ConstraintKind::Equality,
            residual: Residual::LeftAnchor {
                targets: ctx.left_reference.clone(),
            },
        });
        constraints.push(Constraint {
            label: "right relative position".into(),
            kind: ConstraintKind::Equality,
            residual: Residual::RelativePosition {
                offset: ctx.left_orientation * offset,
            },
        });
        for (label, block) in orientation_blocks(
            mode,
            &ctx.left_orientation,
            &ctx.right_orientation,
            &ctx.operator_orientation,
        ) {
            constraints.push(Constraint {
                label: label.into(),
                kind: ConstraintKind::Equality,
                residual: Residual::Constant { values: block.to_vec() },
            });
        }
    }
    Ok(ConstraintSet { constraints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldmodel::{stack, SharedControlParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand3(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::from_fn(|_, _| rng.random_range(-s..s))
    }

    fn rand_rot(rng: &mut ChaCha8Rng) -> Rot3 {
        Rot3::rot_z(rng.random_range(-3.0..3.0))
            * Rot3::rot_y(rng.random_range(-3.0..3.0))
            * Rot3::rot_x(rng.random_range(-3.0..3.0))
    }

    #[test]
    fn floor_plane_examples() {
        let planes = PlaneSet::new(vec![Plane::new(Vec3::z(), -0.8).unwrap()]);
        let x = stack(&Vec3::new(0.3, 0.1, 0.5), &Vec3::new(0.3, -0.1, -0.9));
        let r = plane_residuals(&planes, &x);
        assert!((r[0] + 1.3).abs() < 1e-12);
        assert!((r[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn plane_sign_matches_direct_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rand3(&mut rng, 1.0).normalize();
            let plane = Plane::new(n, rng.random_range(-1.0..1.0)).unwrap();
            let x = Vec6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let r = plane_residuals(&PlaneSet::new(vec![plane]), &x);
            for (i, arm) in Arm::BOTH.iter().enumerate() {
                let satisfied = n.dot(&arm_slice(&x, *arm)) >= plane.offset;
                assert_eq!(r[i] <= 0.0, satisfied);
            }
        }
    }

    #[test]
    fn ellipsoid_examples() {
        let c = Vec3::new(0.5, 0.1, 0.2);
        let obs = EllipsoidObstacle::new(c, Rot3::identity(), Vec3::repeat(1.0), 1.0).unwrap();
        assert_eq!(ellipsoid_residual(&obs, &c), 1.0);
        let p = c + Vec3::new(0.0, 2.0, 0.0);
        assert!((ellipsoid_residual(&obs, &p) + 3.0).abs() < 1e-12);
        // Boundary: |p - c|² = margin.
        let margin = 0.07;
        let obs = EllipsoidObstacle::new(c, Rot3::identity(), Vec3::repeat(1.0), margin).unwrap();
        let dir = Vec3::new(1.0, -2.0, 0.5).normalize();
        assert!(ellipsoid_residual(&obs, &(c + dir * margin.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn ellipsoid_isotropic_reparameterization() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let r = rand_rot(&mut rng);
            let z = rand_rot(&mut rng);
            let s = rng.random_range(0.5..4.0);
            let a = EllipsoidObstacle::new(Vec3::zeros(), r, Vec3::repeat(s), 0.1).unwrap();
            let b = EllipsoidObstacle::new(Vec3::zeros(), r * z, Vec3::repeat(s), 0.1).unwrap();
            let p = rand3(&mut rng, 1.0);
            assert!((ellipsoid_residual(&a, &p) - ellipsoid_residual(&b, &p)).abs() < 1e-12);
        }
    }

    #[test]
    fn coupling_independent_is_empty() {
        let id = Rot3::identity();
        let r = coupling_residuals(
            &GraspMode::Independent,
            &Vec3::zeros(),
            &Vec3::x(),
            &id,
            &id,
            &id,
            &Vec3::zeros(),
        );
        assert_eq!(r.len(), 0);
    }

    #[test]
    fn coupling_feasible_top_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let r_l = rand_rot(&mut rng);
        let offset = Vec3::new(0.0, -0.3, 0.0);
        let x_l = rand3(&mut rng, 0.5);
        let x_r = x_l + r_l * offset;
        let mode = GraspMode::TopDownFront { offset };
        let r = coupling_residuals(&mode, &x_l, &x_r, &r_l, &r_l, &r_l, &x_l);
        assert_eq!(r.len(), 20);
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn coupling_side_orientation() {
        let r_l = Rot3::rot_x(0.4);
        let offset = Vec3::new(0.0, -0.25, 0.0);
        let mode = GraspMode::Side { offset };
        let x_l = Vec3::new(0.6, 0.1, 0.3);
        let x_r = x_l + r_l * offset;
        let opposed = r_l * rot_z(std::f64::consts::PI);
        let r = coupling_residuals(&mode, &x_l, &x_r, &r_l, &opposed, &r_l, &x_l);
        assert!(r.rows(11, 9).amax() < 1e-12);
        let r = coupling_residuals(&mode, &x_l, &x_r, &r_l, &r_l, &r_l, &x_l);
        assert!((r.rows(11, 9).norm() - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn coupling_norms_invariant_under_common_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let g = rand_rot(&mut rng);
            let (x_l, x_r, xd) = (rand3(&mut rng, 1.0), rand3(&mut rng, 1.0), rand3(&mut rng, 1.0));
            let (r_l, r_r, r_o) = (rand_rot(&mut rng), rand_rot(&mut rng), rand_rot(&mut rng));
            for mode in [
                GraspMode::TopDownFront {
                    offset: rand3(&mut rng, 0.4),
                },
                GraspMode::Side {
                    offset: rand3(&mut rng, 0.4),
                },
            ] {
                let a = coupling_residuals(&mode, &x_l, &x_r, &r_l, &r_r, &r_o, &xd);
                let b = coupling_residuals(
                    &mode,
                    &(g * x_l),
                    &(g * x_r),
                    &(g * r_l),
                    &(g * r_r),
                    &(g * r_o),
                    &(g * xd),
                );
                assert!((a - b).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn velocity_bound_examples() {
        let cfg = SharedControlConfig::new(SharedControlParams {
            u_min: [-0.5; 3],
            u_max: [0.5; 3],
            ..Default::default()
        })
        .unwrap();
        let r = velocity_bound_residuals(&Vec6::zeros(), &cfg);
        assert!(r.iter().all(|v| (*v + 0.5).abs() < 1e-15));
        let mut u = Vec6::zeros();
        u[2] = 0.5;
        assert_eq!(velocity_bound_residuals(&u, &cfg)[2], 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let u = Vec6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let r = velocity_bound_residuals(&u, &cfg);
            for i in 0..6 {
                assert_eq!(r[i] > 0.0, u[i] > 0.5);
                assert_eq!(r[i + 6] > 0.0, u[i] < -0.5);
            }
        }
    }

    fn sample_world(rng: &mut ChaCha8Rng) -> World {
        World {
            planes: PlaneSet::new(vec![Plane::new(rand3(rng, 1.0).normalize(), 0.1).unwrap()]),
            ellipsoids: vec![EllipsoidObstacle::new(
                rand3(rng, 0.5),
                rand_rot(rng),
                Vec3::from_fn(|_, _| rng.random_range(0.5..5.0)),
                0.02,
            )
            .unwrap()],
        }
    }

    #[test]
    fn assembly_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SharedControlConfig::default();
        let world = sample_world(&mut rng);
        let set = assemble(&world, &GraspMode::Independent, &cfg, None).unwrap();
        assert_eq!(set.inequality_rows(), 2 + 2 + 12);
        assert_eq!(set.equality_rows(), 0);

        let empty = assemble(&World::default(), &GraspMode::Independent, &cfg, None).unwrap();
        assert_eq!(empty.len(), 1);
        assert_eq!(empty.inequality_rows(), 12);

        let mode = GraspMode::TopDownFront {
            offset: Vec3::new(0.0, -0.3, 0.0),
        };
        assert_eq!(assemble(&world, &mode, &cfg, None), Err(Error::MissingCouplingContext));
        let ctx = CouplingContext {
            left_orientation: Rot3::identity(),
            right_orientation: Rot3::identity(),
            operator_orientation: Rot3::identity(),
            left_reference: vec![Vec3::zeros(); 11],
        };
        let coupled = assemble(&world, &mode, &cfg, Some(&ctx)).unwrap();
        assert_eq!(coupled.equality_count(), 4);
        assert_eq!(coupled.equality_rows(), 3 + 3 + 9 + 9);
        assert_eq!(coupled.inequality_rows(), 16);
    }

    #[test]
    fn jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let cfg = SharedControlConfig::default();
        for _ in 0..200 {
            let world = sample_world(&mut rng);
            let mode = GraspMode::Side {
                offset: rand3(&mut rng, 0.3),
            };
            let ctx = CouplingContext {
                left_orientation: rand_rot(&mut rng),
                right_orientation: rand_rot(&mut rng),
                operator_orientation: rand_rot(&mut rng),
                left_reference: (0..11).map(|_| rand3(&mut rng, 0.5)).collect(),
            };
            let set = assemble(&world, &mode, &cfg, Some(&ctx)).unwrap();
            let k = rng.random_range(0..11);
            let v = Vec6::from_fn(|_, _| rng.random_range(-0.8..0.8));
            for c in set.iter() {
                let j = c.jacobian(k, &v);
                let h = 1e-6;
                for col in 0..6 {
                    let mut vp = v;
                    let mut vm = v;
                    vp[col] += h;
                    vm[col] -= h;
                    let fd = (c.evaluate(k, &vp) - c.evaluate(k, &vm)) / (2.0 * h);
                    for row in 0..c.dim() {
                        let err = (fd[row] - j[(row, col)]).abs();
                        let scale = j[(row, col)].abs().max(1.0);
                        assert!(err <= 1e-5 * scale, "{}: row {row} col {col}: {err}", c.label);
                    }
                }
            }
        }
    }
}
