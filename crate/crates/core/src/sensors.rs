//! Simulated gyro, accelerometer and magnetometer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{RigidBodyState, VehicleParams};
use crate::geom::Vec3;

/// World-frame magnetic reference: due north.
pub const MAG_NORTH: Vec3 = Vec3::X;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuReading {
    /// Body rates, rad/s.
    pub gyro: Vec3,
    /// Specific force in the body frame, m/s^2.
    pub accel: Vec3,
    /// Normalized field direction in the body frame.
    pub mag: Vec3,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub gyro_noise_sd: f64,
    pub accel_noise_sd: f64,
    pub mag_noise_sd: f64,
    /// Weight of the newest accelerometer/magnetometer sample in the
    /// controller's low-pass filter. 1 disables filtering.
    pub lowpass_alpha: f64,
    /// Frame vibration seen by the accelerometer, m/s^2 per unit of motor
    /// bias (see [`VehicleParams::motor_bias`]).
    pub vibration_gain: f64,
    pub seed: u64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            gyro_noise_sd: 0.005,
            accel_noise_sd: 0.05,
            mag_noise_sd: 0.01,
            lowpass_alpha: 0.1,
            vibration_gain: 70.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid sensor configuration: {0}")]
pub struct SensorConfigError(pub String);

impl SensorConfig {
    pub fn noiseless() -> Self {
        Self {
            gyro_noise_sd: 0.0,
            accel_noise_sd: 0.0,
            mag_noise_sd: 0.0,
            lowpass_alpha: 1.0,
            vibration_gain: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SensorConfigError> {
        let sds = [self.gyro_noise_sd, self.accel_noise_sd, self.mag_noise_sd, self.vibration_gain];
        if sds.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(SensorConfigError(
                "noise standard deviations and vibration gain must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lowpass_alpha) {
            return Err(SensorConfigError("lowpass_alpha must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Noise-free reading of `state`.
pub fn ideal_reading(state: &RigidBodyState, gravity: Vec3) -> ImuReading {
    let q = state.orientation;
    ImuReading {
        gyro: state.angular_velocity,
        accel: q.inverse_rotate(state.acceleration - gravity),
        mag: q.inverse_rotate(MAG_NORTH),
        time: state.time,
    }
}

/// Per-axis exponential smoothing, `alpha * current + (1 - alpha) * prev`.
pub fn low_pass(prev: Vec3, current: Vec3, alpha: f64) -> Vec3 {
    current * alpha + prev * (1.0 - alpha)
}

/// Vibration amplitude vector at the IMU for the vehicle's motor bias.
///
/// A rotor spinning off its nominal rate excites the frame along a fixed
/// direction combining the vertical axis and the side of the arm it sits on.
pub fn vibration_amplitude(params: &VehicleParams, gain: f64) -> Vec3 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    params
        .rotor_positions()
        .iter()
        .zip(params.motor_bias)
        .fold(Vec3::ZERO, |acc, (r, bias)| {
            let dir = Vec3::new(0.0, s * r.y.signum(), -s);
            acc + dir * (gain * bias.abs())
        })
}

/// Stateful IMU with its own seeded noise stream.
#[derive(Debug, Clone)]
pub struct Imu {
    config: SensorConfig,
    rng: ChaCha8Rng,
    reads: u64,
}

impl Imu {
    pub fn new(config: SensorConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self { config, rng, reads: 0 }
    }

    pub fn config(&self) -> &SensorConfig {
        &self.config
    }

    fn gaussian(&mut self, sd: f64) -> Vec3 {
        if sd == 0.0 {
            return Vec3::ZERO;
        }
        let mut n = || {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            z * sd
        };
        Vec3::new(n(), n(), n())
    }

    /// Reads gyro, accelerometer and magnetometer. Gaussian noise is added
    /// per axis. Motor-bias vibration aliases to the Nyquist rate, so it
    /// flips sign on every read.
    pub fn read(&mut self, state: &RigidBodyState, params: &VehicleParams) -> ImuReading {
        let mut r = ideal_reading(state, params.gravity);
        let vib = vibration_amplitude(params, self.config.vibration_gain);
        let sign = if self.reads.is_multiple_of(2) { 1.0 } else { -1.0 };
        self.reads += 1;
        r.accel += vib * sign;
        r.gyro += self.gaussian(self.config.gyro_noise_sd);
        r.accel += self.gaussian(self.config.accel_noise_sd);
        r.mag += self.gaussian(self.config.mag_noise_sd);
        r
    }
}

/// One-shot read with a fresh noise stream seeded from `config`.
pub fn read_imu(state: &RigidBodyState, params: &VehicleParams, config: &SensorConfig) -> ImuReading {
    Imu::new(config.clone()).read(state, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::UnitQuaternion;

    fn close(a: Vec3, b: Vec3) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn hover_level_reading() {
        let s = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, -3.0));
        let r = read_imu(&s, &VehicleParams::default(), &SensorConfig::noiseless());
        assert!(close(r.gyro, Vec3::ZERO));
        assert!(close(r.accel, Vec3::new(0.0, 0.0, -9.81)));
        assert!(close(r.mag, Vec3::X));
    }

    #[test]
    fn free_fall_reads_zero() {
        let mut s = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, -3.0));
        s.acceleration = Vec3::new(0.0, 0.0, 9.81);
        s.orientation = UnitQuaternion::from_euler(0.3, -0.2, 1.0);
        let r = read_imu(&s, &VehicleParams::default(), &SensorConfig::noiseless());
        assert!(close(r.accel, Vec3::ZERO));
    }

    #[test]
    fn yawed_magnetometer() {
        let mut s = RigidBodyState::at_rest(Vec3::ZERO);
        s.orientation = UnitQuaternion::from_yaw(std::f64::consts::FRAC_PI_2);
        let r = read_imu(&s, &VehicleParams::default(), &SensorConfig::noiseless());
        assert!(close(r.mag, Vec3::new(0.0, -1.0, 0.0)));
    }

    #[test]
    fn low_pass_examples() {
        let prev = Vec3::new(0.0, 0.0, 0.0);
        let cur = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(low_pass(prev, cur, 1.0), cur);
        assert_eq!(low_pass(prev, cur, 0.0), prev);
        assert!(close(low_pass(prev, cur, 0.2), Vec3::new(0.2, 0.0, 0.0)));
    }

    #[test]
    fn low_pass_converges_geometrically() {
        let target = Vec3::new(2.0, -1.0, 0.5);
        let alpha = 0.3;
        let mut y = Vec3::ZERO;
        let mut prev_err = target.norm();
        for _ in 0..30 {
            y = low_pass(y, target, alpha);
            let err = (target - y).norm();
            assert!((err / prev_err - (1.0 - alpha)).abs() < 1e-6);
            prev_err = err;
        }
    }

    #[test]
    fn same_seed_same_noise() {
        let s = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, -1.0));
        let p = VehicleParams::default();
        let cfg = SensorConfig {
            seed: 42,
            ..SensorConfig::default()
        };
        let mut a = Imu::new(cfg.clone());
        let mut b = Imu::new(cfg);
        for _ in 0..100 {
            assert_eq!(a.read(&s, &p), b.read(&s, &p));
        }
        let mut c = Imu::new(SensorConfig {
            seed: 43,
            ..SensorConfig::default()
        });
        assert_ne!(a.read(&s, &p), c.read(&s, &p));
    }

    #[test]
    fn noise_has_configured_spread() {
        let s = RigidBodyState::at_rest(Vec3::ZERO);
        let p = VehicleParams::default();
        let mut imu = Imu::new(SensorConfig {
            seed: 3,
            ..SensorConfig::default()
        });
        let n = 20_000;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            sum_sq += imu.read(&s, &p).gyro.x.powi(2);
        }
        let sd = (sum_sq / n as f64).sqrt();
        assert!((sd - 0.005).abs() < 0.0002, "{sd}");
    }

    #[test]
    fn vibration_follows_bias() {
        let mut p = VehicleParams::default();
        assert_eq!(vibration_amplitude(&p, 100.0), Vec3::ZERO);
        p.motor_bias = [0.01, 0.0, 0.0, 0.01];
        let v = vibration_amplitude(&p, 100.0);
        assert!(v.y < 0.0 && v.z < 0.0 && v.x == 0.0);
        assert!((v.norm() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(SensorConfig::default().validate().is_ok());
        let bad = SensorConfig {
            lowpass_alpha: 1.5,
            ..SensorConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SensorConfig {
            gyro_noise_sd: -1.0,
            ..SensorConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
