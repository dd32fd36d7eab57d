//! Forward and inverse kinematics of a UR-type 6-DoF arm, and weighted
//! least-squares selection among the IK branches.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worldmodel::{Rot3, Vec3};

pub type JointVector = Vector6<f64>;

/// Branches closer than this (max wrapped joint difference) are merged.
pub const BRANCH_DEDUP_TOLERANCE: f64 = 1e-6;
const POLISH_ITERATIONS: usize = 5;
const GEOMETRY_TOLERANCE: f64 = 1e-12;

/// Standard DH row: `Rz(θ + theta_offset) · Tz(d) · Tx(a) · Rx(alpha)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DhParam {
    pub a: f64,
    pub d: f64,
    pub alpha: f64,
    #[serde(default)]
    pub theta_offset: f64,
}

impl DhParam {
    pub const fn new(a: f64, d: f64, alpha: f64) -> Self {
        Self {
            a,
            d,
            alpha,
            theta_offset: 0.0,
        }
    }

    pub fn transform(&self, theta: f64) -> Matrix4<f64> {
        let (st, ct) = (theta + self.theta_offset).sin_cos();
        let (sa, ca) = self.alpha.sin_cos();
        Matrix4::new(
            ct,
            -st * ca,
            st * sa,
            self.a * ct,
            st,
            ct * ca,
            -ct * sa,
            self.a * st,
            0.0,
            sa,
            ca,
            self.d,
            0.0,
            0.0,
            0.0,
            1.0,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Rot3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vec3::zeros(),
            orientation: Rot3::identity(),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.orientation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position);
        m
    }

    /// Drops any numerical drift in the rotation block.
    fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        Self {
            position: m.fixed_view::<3, 1>(0, 3).into_owned(),
            orientation: Rot3::from_matrix_unchecked(r),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.orientation.transpose();
        Self {
            position: -(rt * self.position),
            orientation: rt,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.orientation * *p + self.position
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.transform_point(&other.position),
            orientation: self.orientation * other.orientation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmModel {
    pub dh: [DhParam; 6],
    pub lower: [f64; 6],
    pub upper: [f64; 6],
    /// Arm base frame expressed in the robot base frame.
    pub mount: Pose,
    /// Preferred posture for branch selection.
    pub q_desired: [f64; 6],
}

impl ArmModel {
    pub fn ur5e(mount: Pose) -> Self {
        Self {
            dh: [
                DhParam::new(0.0, 0.1625, FRAC_PI_2),
                DhParam::new(-0.425, 0.0, 0.0),
                DhParam::new(-0.3922, 0.0, 0.0),
                DhParam::new(0.0, 0.1333, FRAC_PI_2),
                DhParam::new(0.0, 0.0997, -FRAC_PI_2),
                DhParam::new(0.0, 0.0996, 0.0),
            ],
            lower: [-2.0 * PI, -2.0 * PI, -PI, -2.0 * PI, -2.0 * PI, -2.0 * PI],
            upper: [2.0 * PI, 2.0 * PI, PI, 2.0 * PI, 2.0 * PI, 2.0 * PI],
            mount,
            q_desired: [0.0, -FRAC_PI_2, FRAC_PI_2, -FRAC_PI_2, -FRAC_PI_2, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .dh
            .iter()
            .all(|p| p.a.is_finite() && p.d.is_finite() && p.alpha.is_finite() && p.theta_offset.is_finite());
        if !finite || self.q_desired.iter().any(|q| !q.is_finite()) {
            return Err(Error::NonFinite("arm model"));
        }
        for i in 0..6 {
            if !(self.lower[i] < self.upper[i]) {
                return Err(Error::InvalidConfig(format!(
                    "joint {} limits: lower must be below upper",
                    i + 1
                )));
            }
        }
        Rot3::new(*self.mount.orientation.matrix())?;
        if !is_finite_vec(&self.mount.position) {
            return Err(Error::NonFinite("arm mount position"));
        }
        Ok(())
    }

    pub fn q_desired(&self) -> JointVector {
        JointVector::from_row_slice(&self.q_desired)
    }

    pub fn within_limits(&self, q: &JointVector) -> bool {
        (0..6).all(|i| q[i] >= self.lower[i] && q[i] <= self.upper[i])
    }

    fn check_geometry(&self) -> Result<()> {
        let d = &self.dh;
        let zero = |v: f64| v.abs() < GEOMETRY_TOLERANCE;
        let angle = |v: f64, target: f64| (v - target).abs() < GEOMETRY_TOLERANCE;
        if !(zero(d[0].a) && zero(d[3].a) && zero(d[4].a) && zero(d[5].a)) {
            return Err(Error::UnsupportedGeometry("a1, a4, a5, a6 must be zero"));
        }
        if !(zero(d[1].d) && zero(d[2].d)) {
            return Err(Error::UnsupportedGeometry("d2, d3 must be zero"));
        }
        if !(angle(d[0].alpha, FRAC_PI_2)
            && zero(d[1].alpha)
            && zero(d[2].alpha)
            && angle(d[3].alpha, FRAC_PI_2)
            && angle(d[4].alpha, -FRAC_PI_2)
            && zero(d[5].alpha))
        {
            return Err(Error::UnsupportedGeometry(
                "twist angles must be (π/2, 0, 0, π/2, −π/2, 0)",
            ));
        }
        if zero(d[1].a) || zero(d[2].a) || zero(d[5].d) {
            return Err(Error::UnsupportedGeometry("a2, a3, d6 must be non-zero"));
        }
        Ok(())
    }
}

fn is_finite_vec(v: &Vec3) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Wrap to (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

pub fn normalize_joints(q: &JointVector) -> JointVector {
    q.map(normalize_angle)
}

/// Componentwise wrapped difference `a − b` in (−π, π].
pub fn joint_difference(a: &JointVector, b: &JointVector) -> JointVector {
    (a - b).map(normalize_angle)
}

/// Homogeneous transforms of frames 0..=6 in the arm base frame.
fn chain(model: &ArmModel, q: &JointVector) -> [Matrix4<f64>; 7] {
    let mut frames = [Matrix4::identity(); 7];
    for i in 0..6 {
        frames[i + 1] = frames[i] * model.dh[i].transform(q[i]);
    }
    frames
}

/// Flange pose in the arm base frame.
fn fk_local(model: &ArmModel, q: &JointVector) -> Pose {
    Pose::from_homogeneous(&chain(model, q)[6])
}

/// Flange pose in the robot base frame.
pub fn fk(model: &ArmModel, q: &JointVector) -> Pose {
    model.mount.compose(&fk_local(model, q))
}

/// Geometric Jacobian (linear rows first) in the arm base frame.
fn jacobian_local(model: &ArmModel, q: &JointVector) -> Matrix6<f64> {
    let frames = chain(model, q);
    let p = frames[6].fixed_view::<3, 1>(0, 3).into_owned();
    let mut j = Matrix6::zeros();
    for (i, frame) in frames.iter().take(6).enumerate() {
        let z: Vec3 = frame.fixed_view::<3, 1>(0, 2).into_owned();
        let o: Vec3 = frame.fixed_view::<3, 1>(0, 3).into_owned();
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&z.cross(&(p - o)));
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
    }
    j
}

fn pose_error(target: &Pose, current: &Pose) -> Vector6<f64> {
    let dr = target.orientation.matrix() * current.orientation.matrix().transpose();
    let v = Vec3::new(
        dr[(2, 1)] - dr[(1, 2)],
        dr[(0, 2)] - dr[(2, 0)],
        dr[(1, 0)] - dr[(0, 1)],
    ) * 0.5;
    let sin = v.norm();
    let angle = sin.atan2((dr.trace() - 1.0) * 0.5);
    let w = if sin < 1e-300 { v } else { v * (angle / sin) };
    let dp = target.position - current.position;
    Vector6::new(dp.x, dp.y, dp.z, w.x, w.y, w.z)
}

fn polish(model: &ArmModel, target: &Pose, q: JointVector) -> JointVector {
    let mut best = q;
    let mut best_err = pose_error(target, &fk_local(model, &q)).norm();
    let mut current = q;
    for _ in 0..POLISH_ITERATIONS {
        if best_err < 1e-14 {
            break;
        }
        let e = pose_error(target, &fk_local(model, &current));
        let Some(step) = jacobian_local(model, &current).lu().solve(&e) else {
            break;
        };
        current += step;
        let err = pose_error(target, &fk_local(model, &current)).norm();
        if err < best_err {
            best = current;
            best_err = err;
        } else {
            break;
        }
    }
    best
}

fn clamp_unit(v: f64) -> Option<f64> {
    const SLACK: f64 = 1e-9;
    if v.abs() <= 1.0 {
        Some(v)
    } else if v.abs() <= 1.0 + SLACK {
        Some(v.signum())
    } else {
        None
    }
}

/// All analytic branches (up to 8) for a flange pose in the robot base
/// frame, deduplicated and polished, before joint-limit filtering.
pub fn ik_branches(model: &ArmModel, position: &Vec3, orientation: &Rot3) -> Result<Vec<JointVector>> {
    model.check_geometry()?;
    if !is_finite_vec(position) || orientation.matrix().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ik target"));
    }
    let target = model.mount.inverse().compose(&Pose {
        position: *position,
        orientation: *orientation,
    });
    let t06 = target.to_homogeneous();
    let r06 = target.orientation.matrix();
    let z6: Vec3 = r06.column(2).into_owned();
    let d = &model.dh;
    let (d4, d6) = (d[3].d, d[5].d);
    let (a2, a3) = (d[1].a, d[2].a);
    let offset = |i: usize, theta: f64| theta - d[i].theta_offset;

    let p05 = target.position - z6 * d6;
    let r = p05.x.hypot(p05.y);
    let mut out: Vec<JointVector> = Vec::with_capacity(8);
    if r < d4.abs() || r < GEOMETRY_TOLERANCE {
        return Ok(out);
    }
    let phi = p05.y.atan2(p05.x);
    let shoulder = (d4 / r).asin();

    for theta1 in [phi + shoulder, phi + PI - shoulder] {
        let (s1, c1) = theta1.sin_cos();
        let z1 = Vec3::new(s1, -c1, 0.0);
        let Some(c5) = clamp_unit(z6.dot(&z1)) else {
            continue;
        };
        let wrist = c5.acos();
        for theta5 in [wrist, -wrist] {
            let s5 = theta5.sin();
            let theta6 = if s5.abs() < 1e-10 {
                0.0
            } else {
                let v = r06.transpose() * z1;
                (-v.y / s5).atan2(v.x / s5)
            };
            let a1 = d[0].transform(offset(0, theta1));
            let a5 = d[4].transform(offset(4, theta5));
            let a6 = d[5].transform(offset(5, theta6));
            let (Some(a1i), Some(a5i), Some(a6i)) = (a1.try_inverse(), a5.try_inverse(), a6.try_inverse()) else {
                continue;
            };
            let t14 = a1i * t06 * a6i * a5i;
            let (px, py) = (t14[(0, 3)], t14[(1, 3)]);
            let Some(c3) = clamp_unit((px * px + py * py - a2 * a2 - a3 * a3) / (2.0 * a2 * a3)) else {
                continue;
            };
            let elbow = c3.acos();
            let theta234 = t14[(1, 0)].atan2(t14[(0, 0)]);
            for theta3 in [elbow, -elbow] {
                let s3 = theta3.sin();
                let theta2 = py.atan2(px) - (a3 * s3).atan2(a2 + a3 * c3);
                let theta4 = theta234 - theta2 - theta3;
                let raw = JointVector::from_row_slice(&[
                    offset(0, theta1),
                    offset(1, theta2),
                    offset(2, theta3),
                    offset(3, theta4),
                    offset(4, theta5),
                    offset(5, theta6),
                ]);
                let q = normalize_joints(&polish(model, &target, normalize_joints(&raw)));
                let duplicate = out
                    .iter()
                    .any(|o| joint_difference(o, &q).amax() < BRANCH_DEDUP_TOLERANCE);
                if !duplicate {
                    out.push(q);
                }
            }
        }
    }
    Ok(out)
}

/// IK branches inside the joint limits. Empty when the pose is unreachable.
pub fn ik(model: &ArmModel, position: &Vec3, orientation: &Rot3) -> Result<Vec<JointVector>> {
    Ok(ik_branches(model, position, orientation)?
        .into_iter()
        .filter(|q| model.within_limits(q))
        .collect())
}

/// `argmin ‖q − q_current‖²_{W_l} + ‖q − q_desired‖²_{W_d}` over the
/// candidates, using wrapped joint differences. Ties go to the lowest index.
pub fn select_solution(
    solutions: &[JointVector],
    q_current: &JointVector,
    q_desired: &JointVector,
    w_l: &JointVector,
    w_d: &JointVector,
) -> Result<JointVector> {
    if w_l.iter().chain(w_d.iter()).any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidConfig(
            "selection weights must be finite and non-negative".into(),
        ));
    }
    let score = |q: &JointVector| {
        let dl = joint_difference(q, q_current);
        let dd = joint_difference(q, q_desired);
        dl.component_mul(&dl).dot(w_l) + dd.component_mul(&dd).dot(w_d)
    };
    let mut best: Option<(usize, f64)> = None;
    for (i, q) in solutions.iter().enumerate() {
        let s = score(q);
        if best.is_none_or(|(_, b)| s < b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| solutions[i]).ok_or(Error::NoSolutions)
}
