//! Mecanum base kinematics, pad mapping and obstacle gating.

use nalgebra::{Matrix4x3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worldmodel::Vec3;

/// Pad inputs below this magnitude are treated as zero.
pub const PAD_DEAD_ZONE: f64 = 0.05;

/// Upper bound on projection sweeps before gating falls back to a stop.
const GATING_SWEEPS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MecanumParams {
    pub wheel_radius: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl Default for MecanumParams {
    fn default() -> Self {
        Self {
            wheel_radius: 0.0762,
            half_length: 0.25,
            half_width: 0.20,
        }
    }
}

impl MecanumParams {
    pub fn new(wheel_radius: f64, half_length: f64, half_width: f64) -> Result<Self> {
        let p = Self {
            wheel_radius,
            half_length,
            half_width,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.wheel_radius, self.half_length, self.half_width]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            Ok(())
        } else {
            Err(Error::InvalidConfig("mecanum parameters must be positive".into()))
        }
    }

    fn lever(&self) -> f64 {
        self.half_length + self.half_width
    }

    /// The 4×3 wheel matrix without the `1/R_w` factor.
    pub fn matrix(&self) -> Matrix4x3<f64> {
        let l = self.lever();
        Matrix4x3::new(
            1.0, -1.0, -l, //
            1.0, 1.0, l, //
            1.0, 1.0, -l, //
            1.0, -1.0, l,
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BodyTwist {
    pub vx: f64,
    pub vy: f64,
    pub wz: f64,
}

impl BodyTwist {
    pub const ZERO: Self = Self {
        vx: 0.0,
        vy: 0.0,
        wz: 0.0,
    };

    pub fn new(vx: f64, vy: f64, wz: f64) -> Self {
        Self { vx, vy, wz }
    }

    pub fn linear(&self) -> Vec3 {
        Vec3::new(self.vx, self.vy, 0.0)
    }

    fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.wz)
    }

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite() && self.wz.is_finite()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WheelSpeeds(pub [f64; 4]);

pub fn wheel_speeds(twist: &BodyTwist, p: &MecanumParams) -> WheelSpeeds {
    let w: Vector4<f64> = p.matrix() * twist.as_vector() / p.wheel_radius;
    WheelSpeeds([w[0], w[1], w[2], w[3]])
}

/// Least-squares inverse of [`wheel_speeds`]. The wheel matrix has
/// orthogonal columns, so the normal equations are diagonal.
pub fn body_twist(wheels: &WheelSpeeds, p: &MecanumParams) -> BodyTwist {
    let w = Vector4::from_row_slice(&wheels.0);
    let l = p.lever();
    let mtw = p.matrix().transpose() * w;
    BodyTwist {
        vx: p.wheel_radius * mtw[0] / 4.0,
        vy: p.wheel_radius * mtw[1] / 4.0,
        wz: p.wheel_radius * mtw[2] / (4.0 * l * l),
    }
}

fn pad_axis(v: f64) -> f64 {
    let v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
    if v.abs() < PAD_DEAD_ZONE {
        0.0
    } else {
        v
    }
}

/// Left pad drives translation, the right pad's x axis drives yaw.
/// `scale` is (m/s, m/s, rad/s) at full deflection.
pub fn map_pads(left_pad: (f64, f64), right_pad_x: f64, scale: (f64, f64, f64)) -> BodyTwist {
    BodyTwist {
        vx: pad_axis(left_pad.0) * scale.0,
        vy: pad_axis(left_pad.1) * scale.1,
        wz: pad_axis(right_pad_x) * scale.2,
    }
}

/// Direction (unit, base frame) and range of a detected obstacle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleReading {
    pub direction: Vec3,
    pub range: f64,
}

/// Remove the linear-velocity component toward every obstacle closer than
/// `stop_range`. Removal is swept until no in-range direction sees a
/// positive projection; if that does not settle the linear part is zeroed.
/// Yaw rate passes through.
pub fn gate_velocity(twist: &BodyTwist, obstacles: &[ObstacleReading], stop_range: f64) -> BodyTwist {
    let near: Vec<Vec3> = obstacles
        .iter()
        .filter(|o| o.range < stop_range)
        .map(|o| Vec3::new(o.direction.x, o.direction.y, 0.0))
        .collect();
    let mut v = twist.linear();
    let mut clean = false;
    for _ in 0..GATING_SWEEPS {
        clean = true;
        for d in &near {
            let dd = d.norm_squared();
            let proj = v.dot(d);
            if proj > 0.0 && dd > 0.0 {
                v -= d * (proj / dd);
                clean = false;
            }
        }
        if clean {
            break;
        }
    }
    if !clean && near.iter().any(|d| v.dot(d) > 0.0) {
        v = Vec3::zeros();
    }
    BodyTwist {
        vx: v.x,
        vy: v.y,
        wz: twist.wz,
    }
}

/// [`gate_velocity`], plus a full linear stop when anything is closer than
/// `halt_range`.
pub fn gate_velocity_with_halt(
    twist: &BodyTwist,
    obstacles: &[ObstacleReading],
    stop_range: f64,
    halt_range: f64,
) -> BodyTwist {
    if obstacles.iter().any(|o| o.range < halt_range) {
        return BodyTwist {
            vx: 0.0,
            vy: 0.0,
            wz: twist.wz,
        };
    }
    gate_velocity(twist, obstacles, stop_range)
}
