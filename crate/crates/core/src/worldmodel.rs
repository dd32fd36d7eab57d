//! Geometric and configuration types shared by every planning module.
//!
//! Stacked 6-vectors always hold the left arm in indices `0..3` and the
//! right arm in `3..6`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat6 = Matrix6<f64>;

/// Tolerance for the orthonormality and determinant checks on [`Rot3`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Tolerance for unit-norm plane normals.
pub const NORMAL_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Left,
    Right,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Left, Arm::Right];

    /// First index of this arm's block in a stacked 6-vector.
    pub fn offset(self) -> usize {
        match self {
            Arm::Left => 0,
            Arm::Right => 3,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Arm::Left => 0,
            Arm::Right => 1,
        }
    }

    pub fn other(self) -> Arm {
        match self {
            Arm::Left => Arm::Right,
            Arm::Right => Arm::Left,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Left => f.write_str("left"),
            Arm::Right => f.write_str("right"),
        }
    }
}

/// Stack a left/right pair into `[left; right]`.
pub fn stack(left: &Vec3, right: &Vec3) -> Vec6 {
    Vec6::new(left.x, left.y, left.z, right.x, right.y, right.z)
}

/// Inverse of [`stack`].
pub fn split(v: &Vec6) -> (Vec3, Vec3) {
    (arm_slice(v, Arm::Left), arm_slice(v, Arm::Right))
}

pub fn arm_slice(v: &Vec6, arm: Arm) -> Vec3 {
    let o = arm.offset();
    Vec3::new(v[o], v[o + 1], v[o + 2])
}

pub fn set_arm_slice(v: &mut Vec6, arm: Arm, value: &Vec3) {
    let o = arm.offset();
    v[o] = value.x;
    v[o + 1] = value.y;
    v[o + 2] = value.z;
}

pub fn is_finite3(v: &Vec3) -> bool {
    v.iter().all(|c| c.is_finite())
}

/// Left and right quantities of the same kind, such as effector positions
/// or effector velocities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmPair {
    pub left: Vec3,
    pub right: Vec3,
}

pub type EndEffectorPairState = ArmPair;
pub type VelocityPair = ArmPair;

impl ArmPair {
    pub fn new(left: Vec3, right: Vec3) -> Self {
        Self { left, right }
    }

    pub fn zeros() -> Self {
        Self::new(Vec3::zeros(), Vec3::zeros())
    }

    pub fn from_stacked(v: &Vec6) -> Self {
        let (left, right) = split(v);
        Self { left, right }
    }

    pub fn stacked(&self) -> Vec6 {
        stack(&self.left, &self.right)
    }

    pub fn get(&self, arm: Arm) -> &Vec3 {
        match arm {
            Arm::Left => &self.left,
            Arm::Right => &self.right,
        }
    }

    pub fn get_mut(&mut self, arm: Arm) -> &mut Vec3 {
        match arm {
            Arm::Left => &mut self.left,
            Arm::Right => &mut self.right,
        }
    }
}

/// A proper rotation matrix. Construction validates orthonormality and
/// determinant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Rot3(Matrix3<f64>);

impl Rot3 {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rotation matrix"));
        }
        let orthogonality = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if orthogonality > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation { orthogonality, det });
        }
        Ok(Self(m))
    }

    /// Build from nine row-major entries.
    pub fn from_row_slice(rows: &[f64]) -> Result<Self> {
        if rows.len() != 9 {
            return Err(Error::InvalidConfig(format!(
                "rotation needs 9 entries, got {}",
                rows.len()
            )));
        }
        Self::new(Matrix3::from_row_slice(rows))
    }

    /// Wraps a matrix known to be a rotation (a product of validated
    /// rotations, say) without re-checking it.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn rot_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn rot_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn to_row_array(&self) -> [f64; 9] {
        let m = &self.0;
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

    /// Largest entry of `|RᵀR - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).abs().max()
    }

    /// Rotation angle of `selfᵀ · other`, accurate for small angles.
    pub fn angle_to(&self, other: &Rot3) -> f64 {
        let e = self.0.transpose() * other.0;
        let skew = Vec3::new(e[(2, 1)] - e[(1, 2)], e[(0, 2)] - e[(2, 0)], e[(1, 0)] - e[(0, 1)]) * 0.5;
        let cos = ((e.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        skew.norm().atan2(cos)
    }
}

impl TryFrom<[f64; 9]> for Rot3 {
    type Error = Error;

    fn try_from(rows: [f64; 9]) -> Result<Self> {
        Self::from_row_slice(&rows)
    }
}

impl From<Rot3> for [f64; 9] {
    fn from(r: Rot3) -> Self {
        r.to_row_array()
    }
}

impl Mul for Rot3 {
    type Output = Rot3;

    fn mul(self, rhs: Rot3) -> Rot3 {
        Rot3(self.0 * rhs.0)
    }
}

impl Mul<&Rot3> for &Rot3 {
    type Output = Rot3;

    fn mul(self, rhs: &Rot3) -> Rot3 {
        Rot3(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for &Rot3 {
    type Output = Vec3;

    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Mul<Vec3> for Rot3 {
    type Output = Vec3;

    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Rotation about the z axis.
pub fn rot_z(angle: f64) -> Rot3 {
    Rot3::rot_z(angle)
}

/// A grasp target. `frame` rotates base-frame vectors into the goal frame,
/// and `approach_weights` is the diagonal of that goal's attraction weight
/// expressed in the goal frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub position: Vec3,
    pub frame: Rot3,
    pub object_id: String,
    pub approach_weights: Vec3,
    /// Arm this goal is meant for. `None` attracts both arms.
    pub arm: Option<Arm>,
}

impl Goal {
    pub fn new(
        position: Vec3,
        frame: Rot3,
        object_id: impl Into<String>,
        approach_weights: Vec3,
        arm: Option<Arm>,
    ) -> Result<Self> {
        let goal = Self {
            position,
            frame,
            object_id: object_id.into(),
            approach_weights,
            arm,
        };
        goal.validate()?;
        Ok(goal)
    }

    /// A goal with identity frame and unit weights.
    pub fn at(position: Vec3, object_id: impl Into<String>, arm: Option<Arm>) -> Self {
        Self {
            position,
            frame: Rot3::identity(),
            object_id: object_id.into(),
            approach_weights: Vec3::new(1.0, 1.0, 1.0),
            arm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !is_finite3(&self.position) {
            return Err(Error::NonFinite("goal position"));
        }
        if self.approach_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "goal '{}' approach weights must be positive",
                self.object_id
            )));
        }
        Ok(())
    }

    /// The goal duplicated for both arms, `[g; g]`.
    pub fn stacked_position(&self) -> Vec6 {
        stack(&self.position, &self.position)
    }

    /// Whether this goal attracts `arm` given the masking setting.
    pub fn applies_to(&self, arm: Arm, mask_foreign: bool) -> bool {
        !mask_foreign || self.arm.is_none_or(|a| a == arm)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GoalSet {
    pub goals: Vec<Goal>,
}

impl GoalSet {
    pub fn new(goals: Vec<Goal>) -> Self {
        Self { goals }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.goals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.goals.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Goal> {
        self.goals.iter()
    }
}

/// Keep-out ellipsoid `{p : (p - c)ᵀ R M Rᵀ (p - c) < margin}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidObstacle {
    pub center: Vec3,
    pub orientation: Rot3,
    pub scale: Vec3,
    pub margin: f64,
}

impl EllipsoidObstacle {
    pub fn new(center: Vec3, orientation: Rot3, scale: Vec3, margin: f64) -> Result<Self> {
        let obstacle = Self {
            center,
            orientation,
            scale,
            margin,
        };
        obstacle.validate()?;
        Ok(obstacle)
    }

    /// Sphere of the given radius: unit scale with margin `radius²`.
    pub fn sphere(center: Vec3, radius: f64) -> Result<Self> {
        Self::new(center, Rot3::identity(), Vec3::new(1.0, 1.0, 1.0), radius * radius)
    }

    pub fn validate(&self) -> Result<()> {
        if !is_finite3(&self.center) {
            return Err(Error::NonFinite("ellipsoid center"));
        }
        if self.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidConfig("ellipsoid scale must be positive".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::InvalidConfig("ellipsoid margin must be positive".into()));
        }
        Ok(())
    }

    /// `R M Rᵀ`.
    pub fn shape_matrix(&self) -> Matrix3<f64> {
        let r = self.orientation.matrix();
        r * Matrix3::from_diagonal(&self.scale) * r.transpose()
    }

    /// `(p - c)ᵀ R M Rᵀ (p - c)`.
    pub fn quadratic(&self, p: &Vec3) -> f64 {
        let d = p - self.center;
        d.dot(&(self.shape_matrix() * d))
    }

    /// Conservative Euclidean clearance from `p` to the ellipsoid surface
    /// (negative inside).
    pub fn clearance(&self, p: &Vec3) -> f64 {
        let max_scale = self.scale.max();
        (self.quadratic(p).sqrt() - self.margin.sqrt()) / max_scale.sqrt()
    }
}

/// One half-space row `normalᵀ p >= offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    pub fn new(normal: Vec3, offset: f64) -> Result<Self> {
        let plane = Self { normal, offset };
        plane.validate()?;
        Ok(plane)
    }

    pub fn validate(&self) -> Result<()> {
        if !is_finite3(&self.normal) || !self.offset.is_finite() {
            return Err(Error::NonFinite("plane"));
        }
        if (self.normal.norm() - 1.0).abs() > NORMAL_TOLERANCE {
            return Err(Error::InvalidConfig(format!(
                "plane normal must be unit length, got norm {}",
                self.normal.norm()
            )));
        }
        Ok(())
    }

    /// Signed distance, positive on the allowed side.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlaneSet {
    pub rows: Vec<Plane>,
}

impl PlaneSet {
    pub fn new(rows: Vec<Plane>) -> Self {
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Static collision geometry around the arms, in the robot base frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub planes: PlaneSet,
    pub ellipsoids: Vec<EllipsoidObstacle>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspKind {
    Independent,
    TopDownFront,
    Side,
}

impl GraspKind {
    pub fn name(self) -> &'static str {
        match self {
            GraspKind::Independent => "independent",
            GraspKind::TopDownFront => "top_down_front",
            GraspKind::Side => "side",
        }
    }
}

/// How the two arms relate. Coordinated modes carry the right effector's
/// position expressed in the left effector frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraspMode {
    Independent,
    TopDownFront { offset: Vec3 },
    Side { offset: Vec3 },
}

impl GraspMode {
    pub fn new(kind: GraspKind, offset: Option<Vec3>) -> Result<Self> {
        match (kind, offset) {
            (GraspKind::Independent, None) => Ok(GraspMode::Independent),
            (GraspKind::Independent, Some(_)) => Err(Error::UnexpectedGraspOffset),
            (GraspKind::TopDownFront, Some(offset)) => Ok(GraspMode::TopDownFront { offset }),
            (GraspKind::Side, Some(offset)) => Ok(GraspMode::Side { offset }),
            (kind, None) => Err(Error::MissingGraspOffset(kind.name())),
        }
    }

    pub fn kind(&self) -> GraspKind {
        match self {
            GraspMode::Independent => GraspKind::Independent,
            GraspMode::TopDownFront { .. } => GraspKind::TopDownFront,
            GraspMode::Side { .. } => GraspKind::Side,
        }
    }

    pub fn offset(&self) -> Option<Vec3> {
        match self {
            GraspMode::Independent => None,
            GraspMode::TopDownFront { offset } | GraspMode::Side { offset } => Some(*offset),
        }
    }

    pub fn is_coordinated(&self) -> bool {
        !matches!(self, GraspMode::Independent)
    }
}

/// Raw, unvalidated shared-control parameters as they appear in scenario
/// files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharedControlParams {
    pub q_diag: [f64; 6],
    pub r_diag: [f64; 6],
    pub alpha_w: f64,
    pub beta_w: f64,
    pub horizon_t: f64,
    pub horizon_n: usize,
    pub u_min: [f64; 3],
    pub u_max: [f64; 3],
    /// Restrict each goal's attraction to the arm it is assigned to.
    pub mask_foreign_goals: bool,
    /// Disable the goal-attraction term (pure teleoperation).
    pub assist: bool,
}

impl Default for SharedControlParams {
    fn default() -> Self {
        Self {
            q_diag: [1.0; 6],
            r_diag: [0.01; 6],
            alpha_w: 40.0,
            beta_w: 4.0,
            horizon_t: 1.0,
            horizon_n: 10,
            u_min: [-0.25; 3],
            u_max: [0.25; 3],
            mask_foreign_goals: true,
            assist: true,
        }
    }
}

/// Validated weights and horizon of the shared-control problem.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedControlConfig {
    params: SharedControlParams,
    delta: f64,
}

impl SharedControlConfig {
    pub fn new(params: SharedControlParams) -> Result<Self> {
        let finite = params
            .q_diag
            .iter()
            .chain(&params.r_diag)
            .chain(&params.u_min)
            .chain(&params.u_max)
            .chain([&params.alpha_w, &params.beta_w, &params.horizon_t])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("shared control parameters"));
        }
        if params.q_diag.iter().any(|q| *q < 0.0) {
            return Err(Error::InvalidConfig("q_diag must be non-negative".into()));
        }
        if params.r_diag.iter().any(|r| *r <= 0.0) {
            return Err(Error::InvalidConfig("r_diag must be positive".into()));
        }
        if params.alpha_w <= 0.0 {
            return Err(Error::InvalidConfig("alpha_w must be positive".into()));
        }
        if params.horizon_n == 0 || params.horizon_t <= 0.0 {
            return Err(Error::InvalidConfig(
                "horizon_n must be >= 1 and horizon_t positive".into(),
            ));
        }
        if (0..3).any(|i| params.u_min[i] > params.u_max[i]) {
            return Err(Error::InvalidConfig("u_min must not exceed u_max".into()));
        }
        let delta = params.horizon_t / params.horizon_n as f64;
        Ok(Self { params, delta })
    }

    pub fn params(&self) -> &SharedControlParams {
        &self.params
    }

    pub fn q_diag(&self) -> Vec6 {
        Vec6::from_column_slice(&self.params.q_diag)
    }

    pub fn r_diag(&self) -> Vec6 {
        Vec6::from_column_slice(&self.params.r_diag)
    }

    pub fn alpha_w(&self) -> f64 {
        self.params.alpha_w
    }

    pub fn beta_w(&self) -> f64 {
        self.params.beta_w
    }

    /// Step length `T / N` in seconds.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn horizon_t(&self) -> f64 {
        self.params.horizon_t
    }

    pub fn horizon_n(&self) -> usize {
        self.params.horizon_n
    }

    /// Per-component lower velocity bound, stacked for both arms.
    pub fn u_min(&self) -> Vec6 {
        let u = Vec3::from_column_slice(&self.params.u_min);
        stack(&u, &u)
    }

    pub fn u_max(&self) -> Vec6 {
        let u = Vec3::from_column_slice(&self.params.u_max);
        stack(&u, &u)
    }

    pub fn mask_foreign_goals(&self) -> bool {
        self.params.mask_foreign_goals
    }

    pub fn assist(&self) -> bool {
        self.params.assist
    }

    /// Copy with the goal term switched on or off.
    pub fn with_assist(&self, assist: bool) -> Self {
        let mut out = self.clone();
        out.params.assist = assist;
        out
    }
}

impl Default for SharedControlConfig {
    fn default() -> Self {
        Self::new(SharedControlParams::default()).expect("default parameters are valid")
    }
}
