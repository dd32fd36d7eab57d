//! Operator intent estimation: a constant-velocity Kalman filter per arm and
//! forward propagation of the resulting reference over the horizon.

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Matrix6x3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worldmodel::{is_finite3, stack, SharedControlConfig, Vec3, Vec6};

/// Noise levels of the constant-velocity model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanNoise {
    /// White-acceleration spectral density (m²/s³).
    pub process: f64,
    /// Position measurement variance (m²).
    pub measurement: f64,
    /// Prior variances at the first measurement (m², m²/s²).
    pub initial_position: f64,
    pub initial_velocity: f64,
}

impl Default for KalmanNoise {
    fn default() -> Self {
        Self {
            process: 1e-2,
            measurement: 1e-4,
            initial_position: 1e-2,
            initial_velocity: 1.0,
        }
    }
}

impl KalmanNoise {
    pub fn validate(&self) -> Result<()> {
        if !(self.process > 0.0) || !(self.measurement > 0.0) {
            return Err(Error::InvalidConfig(
                "Kalman process and measurement noise must be positive".into(),
            ));
        }
        if !(self.initial_position > 0.0) || !(self.initial_velocity > 0.0) || !self.initial_velocity.is_finite() {
            return Err(Error::InvalidConfig("Kalman prior variances must be positive".into()));
        }
        Ok(())
    }
}

/// Constant-velocity filter for one effector. State is `[position; velocity]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntentFilter {
    state: Vector6<f64>,
    covariance: Matrix6<f64>,
    noise: KalmanNoise,
}

impl IntentFilter {
    /// Starts at the first measurement with zero velocity.
    pub fn new(first_measurement: Vec3, noise: KalmanNoise) -> Result<Self> {
        if !is_finite3(&first_measurement) {
            return Err(Error::NonFinite("intent measurement"));
        }
        noise.validate()?;
        let mut state = Vector6::zeros();
        state.fixed_rows_mut::<3>(0).copy_from(&first_measurement);
        let (p0, v0) = (noise.initial_position, noise.initial_velocity);
        let covariance = Matrix6::from_diagonal(&Vector6::new(p0, p0, p0, v0, v0, v0));
        Ok(Self {
            state,
            covariance,
            noise,
        })
    }

    pub fn position(&self) -> Vec3 {
        self.state.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vec3 {
        self.state.fixed_rows::<3>(3).into_owned()
    }

    pub fn covariance(&self) -> &Matrix6<f64> {
        &self.covariance
    }

    pub fn noise(&self) -> KalmanNoise {
        self.noise
    }

    /// Predict over `dt` then correct with a position measurement.
    pub fn update(&self, measured: &Vec3, dt: f64) -> Result<Self> {
        if !is_finite3(measured) {
            return Err(Error::NonFinite("intent measurement"));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidConfig(format!("filter step must be positive, got {dt}")));
        }

        let mut f = Matrix6::identity();
        f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Matrix3::identity() * dt));

        let q = self.noise.process;
        let i3 = Matrix3::<f64>::identity();
        let mut process = Matrix6::zeros();
        process
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(i3 * (q * dt.powi(3) / 3.0)));
        process
            .fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(i3 * (q * dt.powi(2) / 2.0)));
        process
            .fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(i3 * (q * dt.powi(2) / 2.0)));
        process.fixed_view_mut::<3, 3>(3, 3).copy_from(&(i3 * (q * dt)));

        let x_pred = f * self.state;
        let p_pred = f * self.covariance * f.transpose() + process;

        let mut h = Matrix3x6::zeros();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&i3);
        let r = i3 * self.noise.measurement;

        let innovation = measured - h * x_pred;
        let s = h * p_pred * h.transpose() + r;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::InvalidConfig("singular innovation covariance".into()))?;
        let gain: Matrix6x3<f64> = p_pred * h.transpose() * s_inv;

        let state = x_pred + gain * innovation;
        // Joseph form keeps the covariance symmetric positive definite.
        let ikh = Matrix6::identity() - gain * h;
        let p = ikh * p_pred * ikh.transpose() + gain * r * gain.transpose();
        let covariance = (p + p.transpose()) * 0.5;

        Ok(Self {
            state,
            covariance,
            noise: self.noise,
        })
    }
}

/// Functional form of [`IntentFilter::update`].
pub fn kf_update(filter: &IntentFilter, measured_position: &Vec3, dt: f64) -> Result<IntentFilter> {
    filter.update(measured_position, dt)
}

/// Desired positions (`N + 1`) and velocities (`N`) over the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceTrajectory {
    pub positions: Vec<Vec6>,
    pub velocities: Vec<Vec6>,
}

impl ReferenceTrajectory {
    /// A reference holding `position` with zero velocity.
    pub fn stationary(position: Vec6, horizon: usize) -> Self {
        Self {
            positions: vec![position; horizon + 1],
            velocities: vec![Vec6::zeros(); horizon],
        }
    }

    /// Propagate `x_i = x_{i-1} + v δ` from `start`.
    pub fn constant_velocity(start: Vec6, velocity: Vec6, delta: f64, horizon: usize) -> Self {
        let mut positions = Vec::with_capacity(horizon + 1);
        positions.push(start);
        for i in 1..=horizon {
            let next = positions[i - 1] + velocity * delta;
            positions.push(next);
        }
        Self {
            positions,
            velocities: vec![velocity; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.velocities.len()
    }

    /// Shift every position by `offset`.
    pub fn shifted(&self, offset: &Vec6) -> Self {
        Self {
            positions: self.positions.iter().map(|p| p + offset).collect(),
            velocities: self.velocities.clone(),
        }
    }
}

/// Reference over the configured horizon from the two filters' current
/// estimates. Desired velocities equal the current velocity estimates.
pub fn propagate_reference(
    filter_left: &IntentFilter,
    filter_right: &IntentFilter,
    cfg: &SharedControlConfig,
) -> ReferenceTrajectory {
    let start = stack(&filter_left.position(), &filter_right.position());
    let velocity = stack(&filter_left.velocity(), &filter_right.velocity());
    ReferenceTrajectory::constant_velocity(start, velocity, cfg.delta(), cfg.horizon_n())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldmodel::SharedControlParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scalar two-state filter for one axis, written out by hand.
    struct AxisFilter {
        p: f64,
        v: f64,
        pp: f64,
        pv: f64,
        vv: f64,
    }

    impl AxisFilter {
        fn new(p: f64) -> Self {
            Self {
                p,
                v: 0.0,
                pp: 1e-2,
                pv: 0.0,
                vv: 1.0,
            }
        }

        fn step(&mut self, z: f64, dt: f64, q: f64, r: f64) {
            let p = self.p + self.v * dt;
            let v = self.v;
            let pp = self.pp + 2.0 * dt * self.pv + dt * dt * self.vv + q * dt.powi(3) / 3.0;
            let pv = self.pv + dt * self.vv + q * dt * dt / 2.0;
            let vv = self.vv + q * dt;
            let s = pp + r;
            let kp = pp / s;
            let kv = pv / s;
            let y = z - p;
            self.p = p + kp * y;
            self.v = v + kv * y;
            self.pp = (1.0 - kp) * pp;
            self.pv = (1.0 - kp) * pv;
            self.vv = vv - kv * pv;
        }
    }

    #[test]
    fn stationary_measurements_give_zero_velocity() {
        let p = Vec3::new(0.4, -0.1, 0.3);
        let mut f = IntentFilter::new(p, KalmanNoise::default()).unwrap();
        for _ in 0..200 {
            f = kf_update(&f, &p, 0.1).unwrap();
        }
        assert!(f.velocity().norm() < 1e-3);
    }

    #[test]
    fn ramp_velocity_matches_axis_oracle() {
        let noise = KalmanNoise::default();
        let p0 = Vec3::new(0.2, 0.1, -0.3);
        let s = Vec3::new(0.05, -0.12, 0.3);
        let dt = 0.1;
        let mut f = IntentFilter::new(p0, noise).unwrap();
        let mut oracle: Vec<AxisFilter> = (0..3).map(|i| AxisFilter::new(p0[i])).collect();
        for k in 1..=200 {
            let z = p0 + s * (k as f64 * dt);
            f = f.update(&z, dt).unwrap();
            for (i, axis) in oracle.iter_mut().enumerate() {
                axis.step(z[i], dt, noise.process, noise.measurement);
            }
        }
        for i in 0..3 {
            assert!((f.velocity()[i] - oracle[i].v).abs() < 1e-9);
            assert!((f.position()[i] - oracle[i].p).abs() < 1e-9);
            assert!((f.velocity()[i] - s[i]).abs() <= 0.01 * s[i].abs());
        }
    }

    #[test]
    fn nan_measurement_is_rejected() {
        let f = IntentFilter::new(Vec3::zeros(), KalmanNoise::default()).unwrap();
        let before = f.clone();
        assert!(f.update(&Vec3::new(f64::NAN, 0.0, 0.0), 0.1).is_err());
        assert!(f.update(&Vec3::zeros(), 0.0).is_err());
        assert_eq!(f, before);
    }

    fn min_eigenvalue(m: &Matrix6<f64>) -> f64 {
        m.symmetric_eigenvalues().min()
    }

    #[test]
    fn covariance_stays_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let noise = KalmanNoise {
                process: 10f64.powf(rng.random_range(-4.0..1.0)),
                measurement: 10f64.powf(rng.random_range(-6.0..-1.0)),
                ..KalmanNoise::default()
            };
            let mut f = IntentFilter::new(Vec3::zeros(), noise).unwrap();
            for _ in 0..rng.random_range(1..6) {
                let z = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                f = f.update(&z, rng.random_range(0.001..0.5)).unwrap();
                let p = f.covariance();
                assert_eq!(*p, p.transpose());
                assert!(min_eigenvalue(p) > 0.0);
            }
        }
    }

    fn cfg(n: usize, t: f64) -> SharedControlConfig {
        SharedControlConfig::new(SharedControlParams {
            horizon_n: n,
            horizon_t: t,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_velocity_reference_is_constant() {
        let f = IntentFilter::new(Vec3::new(0.1, 0.2, 0.3), KalmanNoise::default()).unwrap();
        let g = IntentFilter::new(Vec3::new(-0.1, 0.2, 0.3), KalmanNoise::default()).unwrap();
        let r = propagate_reference(&f, &g, &cfg(10, 1.0));
        assert_eq!(r.positions.len(), 11);
        assert_eq!(r.velocities.len(), 10);
        assert!(r.positions.iter().all(|p| *p == r.positions[0]));
    }

    #[test]
    fn linear_propagation_endpoint() {
        let v = Vec6::new(0.1, 0.0, 0.0, 0.1, 0.0, 0.0);
        let r = ReferenceTrajectory::constant_velocity(Vec6::zeros(), v, 0.1, 10);
        let d = r.positions[10] - r.positions[0];
        assert!((d - Vec6::new(0.1, 0.0, 0.0, 0.1, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn reference_recurrence_holds_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let start = Vec6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let v = Vec6::from_fn(|_, _| rng.random_range(-0.5..0.5));
            let r = ReferenceTrajectory::constant_velocity(start, v, 0.1, 10);
            for i in 1..=10 {
                assert_eq!(r.positions[i], r.positions[i - 1] + v * 0.1);
            }
            assert!(r.velocities.iter().all(|u| *u == v));
        }
    }
}
