//! Cascade attitude/rate control and PWM mixing, run once per control tick.
//!
//! Data flow per tick:
//!
//! 1. attitude estimate from gyro, accelerometer and magnetometer
//!    (complementary filter);
//! 2. rate control loop: PD on the attitude error, giving desired body rates;
//! 3. attitude control loop: PID on the body-rate error against the gyro,
//!    giving the motion commands;
//! 4. mixer: thrust plus the three motion commands into four PWM values.
//!
//! The loop names (`rc` for the PD stage, `ac` for the PID stage) follow the
//! published algorithm even though the PD stage acts on attitude errors.

use serde::{Deserialize, Serialize};

use crate::dynamics::MotorCommands;
use crate::geom::{wrap_angle, Vec3};
use crate::sensors::{low_pass, ImuReading};

/// Below this specific-force magnitude (m/s^2) the accelerometer gives no
/// usable gravity direction.
pub const FREE_FALL_ACCEL: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TargetAttitude {
    #[serde(rename = "phi_T")]
    pub phi_t: f64,
    #[serde(rename = "theta_T")]
    pub theta_t: f64,
    #[serde(rename = "psi_T")]
    pub psi_t: f64,
    pub thrust_cmd: f64,
}

impl TargetAttitude {
    pub fn new(phi_t: f64, theta_t: f64, psi_t: f64, thrust_cmd: f64) -> Self {
        Self {
            phi_t,
            theta_t,
            psi_t,
            thrust_cmd: thrust_cmd.clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EstimatedAttitude {
    pub phi_bar: f64,
    pub theta_bar: f64,
    pub psi_bar: f64,
}

/// Desired body rates produced by the rate control loop.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DesiredRates {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl DesiredRates {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyRateCommand {
    pub roll_rate_cmd: f64,
    pub pitch_rate_cmd: f64,
    pub yaw_rate_cmd: f64,
}

impl BodyRateCommand {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            roll_rate_cmd: roll,
            pitch_rate_cmd: pitch,
            yaw_rate_cmd: yaw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisGains<G> {
    pub roll: G,
    pub pitch: G,
    pub yaw: G,
}

impl<G: Copy> AxisGains<G> {
    pub fn uniform(g: G) -> Self {
        Self {
            roll: g,
            pitch: g,
            yaw: g,
        }
    }

    fn as_array(&self) -> [G; 3] {
        [self.roll, self.pitch, self.yaw]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerGains {
    /// PD_roll_rc, PD_pitch_rc, PD_yaw_rc.
    pub rate_pd: AxisGains<PdGains>,
    /// PID_roll_ac, PID_pitch_ac, PID_yaw_ac.
    pub attitude_pid: AxisGains<PidGains>,
    /// Bound on each PID integrator accumulator.
    pub integrator_limit: f64,
    /// Bound on each motion command, PWM units.
    pub output_limit: f64,
    /// Bound on each desired body rate, rad/s.
    pub rate_limit: f64,
    /// Gyro weight of the complementary attitude filter.
    pub gyro_weight: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            rate_pd: AxisGains::uniform(PdGains { kp: 4.5, kd: 0.05 }),
            attitude_pid: AxisGains::uniform(PidGains {
                kp: 0.15,
                ki: 0.05,
                kd: 0.003,
            }),
            integrator_limit: 0.5,
            output_limit: 0.3,
            rate_limit: 4.0,
            gyro_weight: 0.98,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid controller gains: {0}")]
pub struct GainsError(pub String);

impl ControllerGains {
    pub fn zero() -> Self {
        Self {
            rate_pd: AxisGains::uniform(PdGains { kp: 0.0, kd: 0.0 }),
            attitude_pid: AxisGains::uniform(PidGains {
                kp: 0.0,
                ki: 0.0,
                kd: 0.0,
            }),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GainsError> {
        let pd = self.rate_pd.as_array();
        let pid = self.attitude_pid.as_array();
        let non_negative = pd.iter().all(|g| g.kp >= 0.0 && g.kd >= 0.0)
            && pid.iter().all(|g| g.kp >= 0.0 && g.ki >= 0.0 && g.kd >= 0.0);
        if !non_negative {
            return Err(GainsError("gains must be non-negative".into()));
        }
        if !(self.integrator_limit > 0.0 && self.output_limit > 0.0 && self.rate_limit > 0.0) {
            return Err(GainsError("limits must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gyro_weight) {
            return Err(GainsError("gyro_weight must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SaturationCounters {
    pub rate: u64,
    pub output: u64,
    pub integrator: u64,
    pub pwm: u64,
}

impl SaturationCounters {
    pub fn total(&self) -> u64 {
        self.rate + self.output + self.integrator + self.pwm
    }
}

/// Memory carried between control ticks.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub rc_prev_error: [f64; 3],
    pub ac_prev_error: [f64; 3],
    pub integrator: [f64; 3],
    pub estimate: EstimatedAttitude,
    pub filtered_accel: Option<Vec3>,
    pub filtered_mag: Option<Vec3>,
    /// Low-pass weight for accelerometer and magnetometer samples; 1 passes
    /// readings through unfiltered.
    pub lowpass_alpha: f64,
    pub saturation: SaturationCounters,
}

impl ControllerState {
    pub fn new(lowpass_alpha: f64) -> Self {
        Self {
            rc_prev_error: [0.0; 3],
            ac_prev_error: [0.0; 3],
            integrator: [0.0; 3],
            estimate: EstimatedAttitude::default(),
            filtered_accel: None,
            filtered_mag: None,
            lowpass_alpha,
            saturation: SaturationCounters::default(),
        }
    }

    /// Starts the estimator at a known attitude with empty loop memory.
    pub fn reset(&mut self, estimate: EstimatedAttitude) {
        let alpha = self.lowpass_alpha;
        let saturation = self.saturation;
        *self = Self::new(alpha);
        self.estimate = estimate;
        self.saturation = saturation;
    }
}

impl Default for ControllerState {
    fn default() -> Self {
        Self::new(1.0)
    }
}

/// Roll and pitch implied by the gravity direction in a specific-force
/// reading, or `None` when the reading is too small (free fall).
pub fn tilt_from_accel(accel: Vec3) -> Option<(f64, f64)> {
    if accel.norm() < FREE_FALL_ACCEL {
        return None;
    }
    let roll = (-accel.y).atan2(-accel.z);
    let pitch = accel.x.atan2(accel.y.hypot(accel.z));
    Some((roll, pitch))
}

/// Heading from a body-frame magnetometer vector after removing roll and pitch.
pub fn heading_from_mag(mag: Vec3, roll: f64, pitch: f64) -> Option<f64> {
    if mag.norm() < 1e-6 {
        return None;
    }
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    // Undo roll about x, then pitch about y.
    let y1 = cr * mag.y - sr * mag.z;
    let z1 = sr * mag.y + cr * mag.z;
    let x2 = cp * mag.x + sp * z1;
    Some((-y1).atan2(x2))
}

/// Complementary filter over one tick: gyro-propagated Euler angles are
/// blended with the accelerometer tilt (roll, pitch) and the tilt-compensated
/// magnetometer heading (yaw). `gyro_weight` is the weight of the propagated
/// estimate.
pub fn estimate_attitude(
    imu: &ImuReading,
    prev: EstimatedAttitude,
    dt: f64,
    gyro_weight: f64,
) -> EstimatedAttitude {
    let (sr, cr) = prev.phi_bar.sin_cos();
    let cp = {
        let c = prev.theta_bar.cos();
        if c.abs() < 1e-6 {
            1e-6f64.copysign(c)
        } else {
            c
        }
    };
    let tp = prev.theta_bar.sin() / cp;
    let g = imu.gyro;
    let roll_rate = g.x + tp * (g.y * sr + g.z * cr);
    let pitch_rate = g.y * cr - g.z * sr;
    let yaw_rate = (g.y * sr + g.z * cr) / cp;

    let mut phi = prev.phi_bar + roll_rate * dt;
    let mut theta = prev.theta_bar + pitch_rate * dt;
    let mut psi = prev.psi_bar + yaw_rate * dt;
    let correction = 1.0 - gyro_weight;

    if let Some((acc_roll, acc_pitch)) = tilt_from_accel(imu.accel) {
        phi += correction * wrap_angle(acc_roll - phi);
        theta += correction * wrap_angle(acc_pitch - theta);
    }
    if let Some(mag_yaw) = heading_from_mag(imu.mag, phi, theta) {
        psi += correction * wrap_angle(mag_yaw - psi);
    }
    EstimatedAttitude {
        phi_bar: wrap_angle(phi),
        theta_bar: wrap_angle(theta),
        psi_bar: wrap_angle(psi),
    }
}

fn clamp_counted(v: f64, limit: f64, counter: &mut u64) -> f64 {
    if v > limit {
        *counter += 1;
        limit
    } else if v < -limit {
        *counter += 1;
        -limit
    } else {
        v
    }
}

/// Rate control loop: `kp e + kd (e - e_prev) / dt` per axis on the attitude
/// error, yaw error wrapped to (-pi, pi].
pub fn rate_loop(
    target: &TargetAttitude,
    current: &EstimatedAttitude,
    gains: &ControllerGains,
    state: &mut ControllerState,
    dt: f64,
) -> DesiredRates {
    let errors = [
        target.phi_t - current.phi_bar,
        target.theta_t - current.theta_bar,
        wrap_angle(target.psi_t - current.psi_bar),
    ];
    let pd = gains.rate_pd.as_array();
    let mut out = [0.0; 3];
    for axis in 0..3 {
        let e = errors[axis];
        let de = (e - state.rc_prev_error[axis]) / dt;
        state.rc_prev_error[axis] = e;
        let raw = pd[axis].kp * e + pd[axis].kd * de;
        out[axis] = clamp_counted(raw, gains.rate_limit, &mut state.saturation.rate);
    }
    DesiredRates::new(out[0], out[1], out[2])
}

/// Attitude control loop: PID per axis on `desired - gyro`. The integrator is
/// clamped to `integrator_limit` and the output to `output_limit`.
pub fn attitude_loop(
    desired: &DesiredRates,
    gyro: Vec3,
    gains: &ControllerGains,
    state: &mut ControllerState,
    dt: f64,
) -> BodyRateCommand {
    let errors = [
        desired.roll - gyro.x,
        desired.pitch - gyro.y,
        desired.yaw - gyro.z,
    ];
    let pid = gains.attitude_pid.as_array();
    let mut out = [0.0; 3];
    for axis in 0..3 {
        let e = errors[axis];
        let integ = state.integrator[axis] + e * dt;
        state.integrator[axis] = clamp_counted(
            integ,
            gains.integrator_limit,
            &mut state.saturation.integrator,
        );
        let de = (e - state.ac_prev_error[axis]) / dt;
        state.ac_prev_error[axis] = e;
        let g = pid[axis];
        let raw = g.kp * e + g.ki * state.integrator[axis] + g.kd * de;
        out[axis] = clamp_counted(raw, gains.output_limit, &mut state.saturation.output);
    }
    BodyRateCommand::new(out[0], out[1], out[2])
}

/// The four mixer rows before clamping.
pub fn mix_pwm_unclamped(thrust_cmd: f64, cmd: &BodyRateCommand) -> [f64; 4] {
    let t = thrust_cmd;
    let (phi, theta, psi) = (cmd.roll_rate_cmd, cmd.pitch_rate_cmd, cmd.yaw_rate_cmd);
    [
        t - psi + phi + theta,
        t + psi - phi + theta,
        t - psi - phi - theta,
        t + psi + phi - theta,
    ]
}

pub fn mix_pwm(thrust_cmd: f64, cmd: &BodyRateCommand) -> MotorCommands {
    let [a, b, c, d] = mix_pwm_unclamped(thrust_cmd, cmd);
    MotorCommands::new(a, b, c, d)
}

/// One full tick: filter, estimate, rate loop, attitude loop, mix.
pub fn control_step(
    target: &TargetAttitude,
    imu: &ImuReading,
    gains: &ControllerGains,
    state: &mut ControllerState,
    dt: f64,
) -> MotorCommands {
    let alpha = state.lowpass_alpha;
    let accel = match state.filtered_accel {
        Some(prev) => low_pass(prev, imu.accel, alpha),
        None => imu.accel,
    };
    let mag = match state.filtered_mag {
        Some(prev) => low_pass(prev, imu.mag, alpha),
        None => imu.mag,
    };
    state.filtered_accel = Some(accel);
    state.filtered_mag = Some(mag);
    let filtered = ImuReading {
        accel,
        mag,
        ..*imu
    };

    state.estimate = estimate_attitude(&filtered, state.estimate, dt, gains.gyro_weight);
    let current = state.estimate;
    let desired = rate_loop(target, &current, gains, state, dt);
    let cmd = attitude_loop(&desired, imu.gyro, gains, state, dt);
    let raw = mix_pwm_unclamped(target.thrust_cmd, &cmd);
    if raw.iter().any(|p| !(0.0..=1.0).contains(p)) {
        state.saturation.pwm += 1;
        log::trace!("pwm clamped: {raw:?}");
    }
    mix_pwm(target.thrust_cmd, &cmd)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level_imu() -> ImuReading {
        ImuReading {
            gyro: Vec3::ZERO,
            accel: Vec3::new(0.0, 0.0, -9.81),
            mag: Vec3::X,
            time: 0.0,
        }
    }

    #[test]
    fn level_estimate_is_fixed_point() {
        let mut e = EstimatedAttitude::default();
        for _ in 0..100 {
            e = estimate_attitude(&level_imu(), e, 0.0125, 0.98);
        }
        assert_eq!(e, EstimatedAttitude::default());
    }

    #[test]
    fn gyro_integration_branch() {
        let imu = ImuReading {
            gyro: Vec3::new(0.1, 0.0, 0.0),
            ..level_imu()
        };
        let mut e = EstimatedAttitude::default();
        for _ in 0..100 {
            e = estimate_attitude(&imu, e, 0.01, 1.0);
        }
        assert!((e.phi_bar - 0.1).abs() < 1e-12, "{e:?}");
    }

    #[test]
    fn accel_tilt_fixed_point() {
        let tilt = 10f64.to_radians();
        let imu = ImuReading {
            accel: Vec3::new(0.0, -9.81 * tilt.sin(), -9.81 * tilt.cos()),
            ..level_imu()
        };
        let mut e = EstimatedAttitude::default();
        for _ in 0..2000 {
            e = estimate_attitude(&imu, e, 0.0125, 0.98);
        }
        assert!((e.phi_bar - 0.1745).abs() < 1e-3, "{e:?}");
        assert!(e.theta_bar.abs() < 1e-9);
    }

    #[test]
    fn free_fall_skips_accel() {
        let imu = ImuReading {
            accel: Vec3::new(0.0, 0.3, 0.2),
            ..level_imu()
        };
        let start = EstimatedAttitude {
            phi_bar: 0.2,
            theta_bar: -0.1,
            psi_bar: 0.0,
        };
        let e = estimate_attitude(&imu, start, 0.01, 0.98);
        assert_eq!(e.phi_bar, 0.2);
        assert_eq!(e.theta_bar, -0.1);
    }

    #[test]
    fn heading_compensates_tilt() {
        use crate::geom::UnitQuaternion;
        let q = UnitQuaternion::from_euler(0.3, -0.25, 1.1);
        let mag = q.inverse_rotate(Vec3::X);
        let yaw = heading_from_mag(mag, 0.3, -0.25).unwrap();
        assert!((yaw - 1.1).abs() < 1e-12);
    }

    #[test]
    fn rate_loop_examples() {
        let g = ControllerGains::default();
        let mut s = ControllerState::default();
        let t = TargetAttitude::new(0.1, -0.2, 0.3, 0.5);
        let cur = EstimatedAttitude {
            phi_bar: 0.1,
            theta_bar: -0.2,
            psi_bar: 0.3,
        };
        assert_eq!(rate_loop(&t, &cur, &g, &mut s, 0.01), DesiredRates::default());

        let g = ControllerGains {
            rate_pd: AxisGains::uniform(PdGains { kp: 2.0, kd: 0.0 }),
            ..ControllerGains::default()
        };
        let mut s = ControllerState::default();
        let cur = EstimatedAttitude::default();
        let out = rate_loop(&TargetAttitude::new(0.1, 0.0, 0.0, 0.5), &cur, &g, &mut s, 0.01);
        assert!((out.roll - 0.2).abs() < 1e-15);
    }

    #[test]
    fn yaw_error_wraps() {
        let g = ControllerGains {
            rate_pd: AxisGains::uniform(PdGains { kp: 1.0, kd: 0.0 }),
            ..ControllerGains::default()
        };
        let mut s = ControllerState::default();
        let cur = EstimatedAttitude {
            psi_bar: -3.1,
            ..EstimatedAttitude::default()
        };
        let out = rate_loop(&TargetAttitude::new(0.0, 0.0, 3.1, 0.5), &cur, &g, &mut s, 0.01);
        assert!((out.yaw - (-0.083185307)).abs() < 1e-6, "{out:?}");
    }

    #[test]
    fn attitude_loop_examples() {
        let g = ControllerGains::default();
        let mut s = ControllerState::default();
        let gyro = Vec3::new(0.2, -0.1, 0.05);
        let d = DesiredRates::new(0.2, -0.1, 0.05);
        assert_eq!(attitude_loop(&d, gyro, &g, &mut s, 0.01), BodyRateCommand::default());

        let g = ControllerGains {
            attitude_pid: AxisGains::uniform(PidGains {
                kp: 0.1,
                ki: 0.0,
                kd: 0.0,
            }),
            ..ControllerGains::default()
        };
        let mut s = ControllerState::default();
        let out = attitude_loop(&DesiredRates::new(0.5, 0.0, 0.0), Vec3::ZERO, &g, &mut s, 0.01);
        assert!((out.roll_rate_cmd - 0.05).abs() < 1e-15);
    }

    #[test]
    fn integrator_saturates() {
        let g = ControllerGains {
            attitude_pid: AxisGains::uniform(PidGains {
                kp: 0.0,
                ki: 1.0,
                kd: 0.0,
            }),
            integrator_limit: 0.5,
            ..ControllerGains::default()
        };
        let mut s = ControllerState::default();
        let mut last = BodyRateCommand::default();
        for _ in 0..1000 {
            last = attitude_loop(&DesiredRates::new(1.0, 0.0, 0.0), Vec3::ZERO, &g, &mut s, 0.01);
        }
        assert_eq!(s.integrator[0], 0.5);
        assert!((last.roll_rate_cmd - 0.3).abs() < 1e-15);
        assert!(s.saturation.integrator > 0);
    }

    #[test]
    fn mixer_examples() {
        let z = BodyRateCommand::default();
        assert_eq!(mix_pwm(0.6, &z).as_array(), [0.6; 4]);
        let out = mix_pwm_unclamped(0.6, &BodyRateCommand::new(0.0, 0.0, 0.1));
        let expect = [0.5, 0.7, 0.5, 0.7];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let out = mix_pwm_unclamped(0.5, &BodyRateCommand::new(0.1, 0.0, 0.0));
        let expect = [0.6, 0.4, 0.4, 0.6];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(mix_pwm(0.9, &BodyRateCommand::new(0.3, 0.0, 0.0)).as_array()[0], 1.0);
    }

    #[test]
    fn zero_gains_pass_thrust_through() {
        let g = ControllerGains::zero();
        let mut s = ControllerState::new(1.0);
        let imu = ImuReading {
            gyro: Vec3::new(0.4, -0.3, 0.2),
            accel: Vec3::new(1.0, 2.0, -8.0),
            mag: Vec3::new(0.0, 1.0, 0.0),
            time: 0.0,
        };
        for _ in 0..10 {
            let m = control_step(&TargetAttitude::new(0.2, 0.1, 1.0, 0.45), &imu, &g, &mut s, 0.0125);
            assert_eq!(m.as_array(), [0.45; 4]);
        }
    }

    #[test]
    fn hover_fixed_point() {
        let g = ControllerGains::default();
        let mut s = ControllerState::new(0.1);
        for _ in 0..200 {
            let m = control_step(&TargetAttitude::new(0.0, 0.0, 0.0, 0.5), &level_imu(), &g, &mut s, 0.0125);
            assert_eq!(m.as_array(), [0.5; 4]);
        }
    }

    #[test]
    fn gains_validation() {
        assert!(ControllerGains::default().validate().is_ok());
        let g = ControllerGains {
            output_limit: 0.0,
            ..ControllerGains::default()
        };
        assert!(g.validate().is_err());
        let mut g = ControllerGains::default();
        g.rate_pd.roll.kp = -1.0;
        assert!(g.validate().is_err());
    }
}
