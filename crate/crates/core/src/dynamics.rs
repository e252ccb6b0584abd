//! Rigid-body quadrotor propagation in the NED frame.
//!
//! Motor layout (body frame x forward, y right, z down):
//!
//! ```text
//!        front
//!     1 (CW)   2 (CCW)
//!          \ /
//!          / \
//!     4 (CCW)  3 (CW)
//!        rear
//! ```
//!
//! Motors 1 and 2 sit ahead of the centre of mass, motors 1 and 4 on the left,
//! and motors 2 and 4 spin counter-clockwise seen from above. This matches the
//! sign pattern of the mixer in [`crate::control::mix_pwm`].

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{UnitQuaternion, Vec3};

pub const STANDARD_GRAVITY: f64 = 9.81;

/// Upper bound on a single integration step, seconds.
pub const MAX_DT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DynamicsError {
    #[error("time step {0} s is outside (0, {MAX_DT}]")]
    InvalidTimeStep(f64),
    #[error("non-finite {quantity} during integration at t = {time} s")]
    NonFinite { quantity: &'static str, time: f64 },
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
    #[error("invalid wind model: {0}")]
    InvalidWind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidBodyState {
    #[serde(rename = "p")]
    pub position: Vec3,
    #[serde(rename = "v")]
    pub velocity: Vec3,
    #[serde(rename = "a")]
    pub acceleration: Vec3,
    #[serde(rename = "q")]
    pub orientation: UnitQuaternion,
    #[serde(rename = "omega")]
    pub angular_velocity: Vec3,
    #[serde(rename = "t")]
    pub time: f64,
}

impl RigidBodyState {
    /// Level and at rest at `position`. The stored acceleration is the one a
    /// vehicle in equilibrium would have (zero).
    pub fn at_rest(position: Vec3) -> Self {
        Self {
            position,
            velocity: Vec3::ZERO,
            acceleration: Vec3::ZERO,
            orientation: UnitQuaternion::IDENTITY,
            angular_velocity: Vec3::ZERO,
            time: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite()
            && self.velocity.is_finite()
            && self.acceleration.is_finite()
            && self.orientation.quaternion().is_finite()
            && self.angular_velocity.is_finite()
            && self.time.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    /// kg
    pub mass: f64,
    /// Centre-to-rotor distance, m.
    pub arm_length: f64,
    /// Principal moments of inertia, kg m^2.
    pub inertia_diag: Vec3,
    /// Thrust per unit PWM, N.
    pub thrust_coeff: f64,
    /// Reaction torque per unit PWM, N m.
    pub yaw_torque_coeff: f64,
    /// Linear drag on air-relative velocity, N s / m.
    pub drag_coeff: f64,
    /// World-frame gravity, m/s^2 (points down, +D).
    pub gravity: Vec3,
    /// Per-motor additive PWM offset modelling a rotor that spins slightly
    /// faster (or slower) than commanded.
    pub motor_bias: [f64; 4],
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            arm_length: 0.25,
            inertia_diag: Vec3::new(0.035, 0.035, 0.06),
            thrust_coeff: 4.905,
            yaw_torque_coeff: 0.5,
            drag_coeff: 0.1,
            gravity: Vec3::new(0.0, 0.0, STANDARD_GRAVITY),
            motor_bias: [0.0; 4],
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |m: &str| Err(DynamicsError::InvalidParams(m.to_owned()));
        if !(self.mass > 0.0) {
            return bad("mass must be positive");
        }
        if !(self.thrust_coeff > 0.0) {
            return bad("thrust_coeff must be positive");
        }
        let i = self.inertia_diag;
        if !(i.x > 0.0 && i.y > 0.0 && i.z > 0.0) {
            return bad("inertia components must be positive");
        }
        if !(self.arm_length > 0.0) {
            return bad("arm_length must be positive");
        }
        if !(self.gravity.z > 0.0) || !self.gravity.is_finite() {
            return bad("gravity must point down (+D)");
        }
        if self.drag_coeff < 0.0 || self.yaw_torque_coeff < 0.0 {
            return bad("drag and yaw torque coefficients must be non-negative");
        }
        if self.motor_bias.iter().any(|b| !b.is_finite()) {
            return bad("motor_bias must be finite");
        }
        Ok(())
    }

    /// Per-motor command that exactly balances gravity when level.
    pub fn hover_pwm(&self) -> f64 {
        self.mass * self.gravity.z / (4.0 * self.thrust_coeff)
    }

    /// Rotor positions in the body frame, in motor order 1..4.
    pub fn rotor_positions(&self) -> [Vec3; 4] {
        let h = self.arm_length * std::f64::consts::FRAC_1_SQRT_2;
        [
            Vec3::new(h, -h, 0.0),
            Vec3::new(h, h, 0.0),
            Vec3::new(-h, h, 0.0),
            Vec3::new(-h, -h, 0.0),
        ]
    }

    /// Effective per-motor command after adding the bias, clamped to [0, 1].
    fn effective_pwm(&self, motors: &MotorCommands) -> [f64; 4] {
        let mut out = motors.as_array();
        for (p, b) in out.iter_mut().zip(self.motor_bias) {
            *p = (*p + b).clamp(0.0, 1.0);
        }
        out
    }
}

/// Four motor commands, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotorCommands {
    pwm: [f64; 4],
}

impl MotorCommands {
    /// Clamps every input into [0, 1]. NaN maps to 0.
    pub fn new(pwm1: f64, pwm2: f64, pwm3: f64, pwm4: f64) -> Self {
        let c = |p: f64| if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        Self {
            pwm: [c(pwm1), c(pwm2), c(pwm3), c(pwm4)],
        }
    }

    pub fn uniform(p: f64) -> Self {
        Self::new(p, p, p, p)
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.pwm
    }
}

impl Serialize for MotorCommands {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.pwm.serialize(s)
    }
}

impl<'de> Deserialize<'de> for MotorCommands {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [a, b, c, e] = <[f64; 4]>::deserialize(d)?;
        Ok(Self::new(a, b, c, e))
    }
}

/// Constant mean wind plus per-axis sinusoidal gusts with seeded phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Wind {
    /// World frame, m/s.
    pub mean: Vec3,
    pub gust_amplitude: Vec3,
    /// s
    pub gust_period: f64,
    pub seed: u64,
}

impl Default for Wind {
    fn default() -> Self {
        Self {
            mean: Vec3::ZERO,
            gust_amplitude: Vec3::ZERO,
            gust_period: 10.0,
            seed: 0,
        }
    }
}

impl Wind {
    pub fn calm() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !self.mean.is_finite() || !self.gust_amplitude.is_finite() {
            return Err(DynamicsError::InvalidWind("non-finite components".into()));
        }
        if self.gust_amplitude != Vec3::ZERO && !(self.gust_period > 0.0) {
            return Err(DynamicsError::InvalidWind(
                "gust_period must be positive when gusts are enabled".into(),
            ));
        }
        Ok(())
    }

    /// Gust phases for each axis, derived from the seed.
    pub fn phases(&self) -> Vec3 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Vec3::new(
            rng.random::<f64>() * TAU,
            rng.random::<f64>() * TAU,
            rng.random::<f64>() * TAU,
        )
    }

    /// Air velocity at time `t` given precomputed [`Wind::phases`].
    pub fn velocity_with_phases(&self, t: f64, phases: Vec3) -> Vec3 {
        if self.gust_amplitude == Vec3::ZERO {
            return self.mean;
        }
        let w = TAU / self.gust_period;
        let g = self.gust_amplitude;
        self.mean
            + Vec3::new(
                g.x * (w * t + phases.x).sin(),
                g.y * (w * t + phases.y).sin(),
                g.z * (w * t + phases.z).sin(),
            )
    }

    pub fn velocity(&self, t: f64) -> Vec3 {
        self.velocity_with_phases(t, self.phases())
    }
}

/// Ground plane, D = 0.
pub const GROUND_D: f64 = 0.0;

/// `a = F_net / m + g` with `F_net` the rotor thrust (body -z) rotated into
/// the world plus linear drag on the air-relative velocity.
pub fn net_acceleration(
    state: &RigidBodyState,
    motors: &MotorCommands,
    params: &VehicleParams,
    wind_velocity: Vec3,
) -> Vec3 {
    let p = params.effective_pwm(motors);
    let total = params.thrust_coeff * ((p[0] + p[1]) + (p[2] + p[3]));
    let thrust_world = state.orientation.rotate(Vec3::new(0.0, 0.0, -total));
    let drag = (wind_velocity - state.velocity) * params.drag_coeff;
    (thrust_world + drag) / params.mass + params.gravity
}

/// Trapezoidal velocity update: `v + (a_k + a_k1) / 2 * dt`.
pub fn step_velocity(v_k: Vec3, a_k: Vec3, a_k1: Vec3, dt: f64) -> Vec3 {
    v_k + (a_k + a_k1) * (0.5 * dt)
}

/// Position update with constant acceleration over the step:
/// `p + v dt + a dt^2 / 2`.
pub fn step_position(p_k: Vec3, v_k: Vec3, a_k: Vec3, dt: f64) -> Vec3 {
    p_k + v_k * dt + a_k * (0.5 * dt * dt)
}

/// Applies the body-rate increment on the right and renormalizes.
pub fn step_orientation(q_k: UnitQuaternion, omega: Vec3, dt: f64) -> UnitQuaternion {
    q_k.compose(UnitQuaternion::from_angular_velocity(omega, dt))
}

/// Body torques from the rotor layout divided by the principal inertias.
/// Gyroscopic terms are not modelled.
pub fn angular_acceleration(motors: &MotorCommands, params: &VehicleParams) -> Vec3 {
    let p = params.effective_pwm(motors);
    let h = params.arm_length * std::f64::consts::FRAC_1_SQRT_2;
    let kt = params.thrust_coeff;
    // Grouped sums keep mirrored inputs bit-exact under negation.
    let roll = kt * h * ((p[0] + p[3]) - (p[1] + p[2]));
    let pitch = kt * h * ((p[0] + p[1]) - (p[2] + p[3]));
    let yaw = params.yaw_torque_coeff * ((p[1] + p[3]) - (p[0] + p[2]));
    Vec3::new(roll, pitch, yaw).component_div(params.inertia_diag)
}

fn check(v: Vec3, quantity: &'static str, time: f64) -> Result<Vec3, DynamicsError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DynamicsError::NonFinite { quantity, time })
    }
}

/// Advances the state by `dt`.
///
/// Order: acceleration at the current configuration, position update,
/// orientation and body-rate update, acceleration at the propagated
/// configuration, trapezoidal velocity update. Contact with the ground plane
/// removes any downward velocity and acceleration.
pub fn step(
    state: &RigidBodyState,
    motors: &MotorCommands,
    params: &VehicleParams,
    wind: &Wind,
    dt: f64,
) -> Result<RigidBodyState, DynamicsError> {
    step_with_phases(state, motors, params, wind, wind.phases(), dt)
}

/// [`step`] with the wind gust phases supplied by the caller.
pub fn step_with_phases(
    state: &RigidBodyState,
    motors: &MotorCommands,
    params: &VehicleParams,
    wind: &Wind,
    phases: Vec3,
    dt: f64,
) -> Result<RigidBodyState, DynamicsError> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(DynamicsError::InvalidTimeStep(dt));
    }
    let t = state.time;
    let a_k = check(
        net_acceleration(state, motors, params, wind.velocity_with_phases(t, phases)),
        "acceleration",
        t,
    )?;
    let position = check(
        step_position(state.position, state.velocity, a_k, dt),
        "position",
        t,
    )?;
    let orientation = step_orientation(state.orientation, state.angular_velocity, dt);
    if !orientation.quaternion().is_finite() {
        return Err(DynamicsError::NonFinite {
            quantity: "orientation",
            time: t,
        });
    }
    let alpha = angular_acceleration(motors, params);
    let angular_velocity = check(
        state.angular_velocity + alpha * dt,
        "angular velocity",
        t,
    )?;

    let mut next = RigidBodyState {
        position,
        velocity: state.velocity + a_k * dt,
        acceleration: a_k,
        orientation,
        angular_velocity,
        time: t + dt,
    };
    let a_k1 = check(
        net_acceleration(&next, motors, params, wind.velocity_with_phases(t + dt, phases)),
        "acceleration",
        t + dt,
    )?;
    next.velocity = check(
        step_velocity(state.velocity, a_k, a_k1, dt),
        "velocity",
        t + dt,
    )?;
    next.acceleration = a_k1;
    apply_ground_contact(&mut next, GROUND_D);
    Ok(next)
}

/// Inelastic contact with a horizontal surface at depth `ground_d`.
pub fn apply_ground_contact(state: &mut RigidBodyState, ground_d: f64) {
    if state.position.z >= ground_d {
        state.position.z = ground_d;
        if state.velocity.z > 0.0 {
            state.velocity.z = 0.0;
        }
        if state.acceleration.z > 0.0 {
            state.acceleration.z = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn no_drag() -> VehicleParams {
        VehicleParams {
            drag_coeff: 0.0,
            ..VehicleParams::default()
        }
    }

    #[test]
    fn free_fall_acceleration() {
        let s = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, -12.0));
        let a = net_acceleration(&s, &MotorCommands::uniform(0.0), &VehicleParams::default(), Vec3::ZERO);
        assert_eq!(a, Vec3::new(0.0, 0.0, 9.81));
    }

    #[test]
    fn hover_and_double_thrust() {
        let p = VehicleParams::default();
        let s = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, -5.0));
        let a = net_acceleration(&s, &MotorCommands::uniform(p.hover_pwm()), &p, Vec3::ZERO);
        assert!(a.norm() < 1e-12, "{a:?}");
        let a = net_acceleration(&s, &MotorCommands::uniform(2.0 * p.hover_pwm()), &p, Vec3::ZERO);
        assert!((a - Vec3::new(0.0, 0.0, -9.81)).norm() < 1e-12);
    }

    #[test]
    fn velocity_examples() {
        let g = Vec3::new(0.0, 0.0, 9.81);
        assert_eq!(step_velocity(Vec3::ZERO, g, g, 1.0), g);
        let v = Vec3::new(1.0, 2.0, 3.0);
        let a = Vec3::new(0.3, -1.0, 2.0);
        assert_eq!(step_velocity(v, a, -a, 0.7), v);
        let out = step_velocity(v, Vec3::new(2.0, 0.0, 0.0), Vec3::new(4.0, 0.0, 0.0), 0.5);
        assert_eq!(out, Vec3::new(2.5, 2.0, 3.0));
    }

    #[test]
    fn position_examples() {
        let out = step_position(Vec3::ZERO, Vec3::ZERO, Vec3::new(0.0, 0.0, 9.81), 1.0);
        assert_eq!(out, Vec3::new(0.0, 0.0, 4.905));
        let p = Vec3::new(1.0, 2.0, -3.0);
        let v = Vec3::new(0.5, -1.0, 0.0);
        assert_eq!(step_position(p, v, Vec3::ZERO, 0.2), p + v * 0.2);
        let out = step_position(Vec3::new(70.0, -450.0, -12.0), Vec3::X, Vec3::ZERO, 0.05);
        assert!((out - Vec3::new(70.05, -450.0, -12.0)).norm() < 1e-12);
    }

    #[test]
    fn orientation_examples() {
        let q = UnitQuaternion::from_euler(0.1, 0.2, 0.3);
        assert_eq!(step_orientation(q, Vec3::ZERO, 0.05), q);
        let half = step_orientation(UnitQuaternion::IDENTITY, Vec3::new(0.0, 0.0, PI), 1.0);
        let expect = UnitQuaternion::from_axis_angle(Vec3::Z, PI).unwrap();
        for (a, b) in half.quaternion().to_array().iter().zip(expect.quaternion().to_array()) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = Vec3::new(0.3, -0.2, 0.9);
        let two = step_orientation(step_orientation(q, w, 0.05), w, 0.05);
        let one = step_orientation(q, w, 0.1);
        for (a, b) in two.quaternion().to_array().iter().zip(one.quaternion().to_array()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn torque_sign_patterns() {
        let p = VehicleParams::default();
        assert_eq!(angular_acceleration(&MotorCommands::uniform(0.5), &p), Vec3::ZERO);
        let a = angular_acceleration(&MotorCommands::new(0.6, 0.4, 0.4, 0.6), &p);
        assert!(a.x > 0.0 && a.y.abs() < 1e-12 && a.z.abs() < 1e-12, "{a:?}");
        let a = angular_acceleration(&MotorCommands::new(0.4, 0.6, 0.4, 0.6), &p);
        assert!(a.z > 0.0 && a.x.abs() < 1e-12 && a.y.abs() < 1e-12, "{a:?}");
        let a = angular_acceleration(&MotorCommands::new(0.6, 0.6, 0.4, 0.4), &p);
        assert!(a.y > 0.0 && a.x.abs() < 1e-12 && a.z.abs() < 1e-12, "{a:?}");
    }

    #[test]
    fn torques_agree_with_lever_arms() {
        // r x F summed over the rotor positions, independent of the grouped sums.
        let p = VehicleParams::default();
        let m = MotorCommands::new(0.3, 0.55, 0.7, 0.45);
        let pwm = m.as_array();
        let mut torque = Vec3::ZERO;
        for (r, u) in p.rotor_positions().iter().zip(pwm) {
            torque += r.cross(Vec3::new(0.0, 0.0, -p.thrust_coeff * u));
        }
        torque.z = p.yaw_torque_coeff * (-pwm[0] + pwm[1] - pwm[2] + pwm[3]);
        let expect = torque.component_div(p.inertia_diag);
        assert!((angular_acceleration(&m, &p) - expect).norm() < 1e-9);
    }

    #[test]
    fn hover_holds_position() {
        let p = VehicleParams::default();
        let mut s = RigidBodyState::at_rest(Vec3::new(3.0, -2.0, -10.0));
        let m = MotorCommands::uniform(p.hover_pwm());
        for _ in 0..100 {
            s = step(&s, &m, &p, &Wind::calm(), 0.05).unwrap();
        }
        assert!((s.position - Vec3::new(3.0, -2.0, -10.0)).norm() < 1e-6);
    }

    #[test]
    fn free_fall_closed_form() {
        let p = no_drag();
        let mut s = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, -12.0));
        let m = MotorCommands::uniform(0.0);
        let dt = 0.05;
        for k in 1..=20 {
            s = step(&s, &m, &p, &Wind::calm(), dt).unwrap();
            let t = k as f64 * dt;
            assert!((s.position.z - (-12.0 + 4.905 * t * t)).abs() < 1e-9);
        }
        // Lands after sqrt(12 / 4.905) s and stays put.
        for _ in 0..40 {
            s = step(&s, &m, &p, &Wind::calm(), dt).unwrap();
        }
        assert_eq!(s.position.z, 0.0);
        assert_eq!(s.velocity.z, 0.0);
    }

    #[test]
    fn rejects_bad_dt() {
        let s = RigidBodyState::at_rest(Vec3::ZERO);
        let p = VehicleParams::default();
        let m = MotorCommands::uniform(0.5);
        assert!(matches!(step(&s, &m, &p, &Wind::calm(), 0.0), Err(DynamicsError::InvalidTimeStep(_))));
        assert!(matches!(step(&s, &m, &p, &Wind::calm(), 0.2), Err(DynamicsError::InvalidTimeStep(_))));
    }

    #[test]
    fn non_finite_is_reported() {
        let mut s = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, -5.0));
        s.velocity.x = f64::INFINITY;
        let err = step(&s, &MotorCommands::uniform(0.5), &VehicleParams::default(), &Wind::calm(), 0.05)
            .unwrap_err();
        assert!(matches!(err, DynamicsError::NonFinite { .. }), "{err:?}");
    }

    #[test]
    fn motor_commands_clamp() {
        let m = MotorCommands::new(-0.2, 1.4, f64::NAN, 0.3);
        assert_eq!(m.as_array(), [0.0, 1.0, 0.0, 0.3]);
    }

    #[test]
    fn params_validation() {
        assert!(VehicleParams::default().validate().is_ok());
        let bad = VehicleParams {
            mass: 0.0,
            ..VehicleParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = VehicleParams {
            gravity: Vec3::new(0.0, 0.0, -9.81),
            ..VehicleParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn wind_gusts_are_seeded() {
        let w = Wind {
            mean: Vec3::new(1.0, 0.0, 0.0),
            gust_amplitude: Vec3::new(0.5, 0.5, 0.0),
            gust_period: 4.0,
            seed: 7,
        };
        assert_eq!(w.velocity(1.3), w.clone().velocity(1.3));
        let other = Wind { seed: 8, ..w.clone() };
        assert_ne!(w.velocity(1.3), other.velocity(1.3));
        assert!(Wind { gust_period: 0.0, ..w }.validate().is_err());
    }
}
