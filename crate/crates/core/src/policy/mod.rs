//! Navigation policies and the mapping from their output to attitude targets.
//!
//! A policy sees an [`Observation`] once per mission iteration and answers
//! with a [`PolicyOutput`]: a position delta in NED plus an orientation
//! quaternion. [`to_target`] turns that into a [`TargetAttitude`] for the
//! cascade controller.

pub mod remote;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::control::TargetAttitude;
use crate::dynamics::{RigidBodyState, VehicleParams};
use crate::geom::{wrap_angle, Quaternion, UnitQuaternion, Vec3};
use crate::mission::world::{geo_fence, World, MAX_RAY_RANGE};
use crate::sensors::ImuReading;

pub use remote::{serve_check, RemotePolicy};

/// Number of range rays in an observation.
pub const RAY_COUNT: usize = 8;
/// Half-width of the ray fan around the current heading, rad.
pub const RAY_HALF_SPAN: f64 = 70.0 * std::f64::consts::PI / 180.0;
/// Largest accepted |dN|, |dE| or |dD|, m.
pub const MAX_STEP: f64 = 50.0;
/// Quaternions further than this from unit norm are rejected, not
/// renormalized.
pub const QUATERNION_NORM_TOLERANCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("timeout waiting for policy server")]
    Timeout,
    #[error("connection error: {0}")]
    Io(String),
    #[error("missing field: {0}")]
    MissingField(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("quaternion norm {0} is too far from 1")]
    QuaternionNorm(f64),
    #[error("replay log exhausted after {0} outputs")]
    Exhausted(usize),
    #[error("invalid policy: {0}")]
    Invalid(String),
}

impl PolicyError {
    /// Short machine-readable cause.
    pub fn cause(&self) -> &'static str {
        match self {
            Self::Timeout => "timeout",
            Self::Io(_) => "io",
            Self::MissingField(_) => "missing field",
            Self::Malformed(_) => "malformed",
            Self::QuaternionNorm(_) => "quaternion norm",
            Self::Exhausted(_) => "exhausted",
            Self::Invalid(_) => "invalid",
        }
    }
}

/// Heading of ray `i`, relative to the vehicle yaw.
pub fn ray_offset(i: usize) -> f64 {
    -RAY_HALF_SPAN + 2.0 * RAY_HALF_SPAN * i as f64 / (RAY_COUNT - 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub state: RigidBodyState,
    pub imu: ImuReading,
    /// Distances along the ray fan, left to right, m.
    pub range_sensors: [f64; RAY_COUNT],
    pub iteration: u64,
}

impl Observation {
    /// Casts the ray fan from the vehicle.
    pub fn sense(state: RigidBodyState, imu: ImuReading, world: &World, iteration: u64) -> Self {
        let yaw = state.orientation.yaw();
        let headings: [f64; RAY_COUNT] = std::array::from_fn(|i| yaw + ray_offset(i));
        let rays = world.cast_rays(state.position, &headings);
        let range_sensors = std::array::from_fn(|i| rays[i]);
        Self {
            state,
            imu,
            range_sensors,
            iteration,
        }
    }

    /// Observation without obstacles: every ray at full range.
    pub fn open(state: RigidBodyState, imu: ImuReading, iteration: u64) -> Self {
        Self {
            state,
            imu,
            range_sensors: [MAX_RAY_RANGE; RAY_COUNT],
            iteration,
        }
    }
}

/// The seven-value policy output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolicyOutput {
    #[serde(rename = "dN")]
    pub d_n: f64,
    #[serde(rename = "dE")]
    pub d_e: f64,
    #[serde(rename = "dD")]
    pub d_d: f64,
    pub q: UnitQuaternion,
}

#[derive(Deserialize)]
struct RawOutput {
    #[serde(rename = "dN")]
    d_n: f64,
    #[serde(rename = "dE")]
    d_e: f64,
    #[serde(rename = "dD")]
    d_d: f64,
    q: [f64; 4],
}

impl<'de> Deserialize<'de> for PolicyOutput {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawOutput::deserialize(d)?;
        let [q0, q1, q2, q3] = raw.q;
        PolicyOutput::ingest(raw.d_n, raw.d_e, raw.d_d, Quaternion::new(q0, q1, q2, q3))
            .map_err(serde::de::Error::custom)
    }
}

impl PolicyOutput {
    pub const HOVER: PolicyOutput = PolicyOutput {
        d_n: 0.0,
        d_e: 0.0,
        d_d: 0.0,
        q: UnitQuaternion::IDENTITY,
    };

    /// Validates raw model output: deltas clamped to [`MAX_STEP`],
    /// quaternion renormalized when its norm is within
    /// [`QUATERNION_NORM_TOLERANCE`] of 1 and rejected otherwise.
    pub fn ingest(d_n: f64, d_e: f64, d_d: f64, q: Quaternion) -> Result<Self, PolicyError> {
        if ![d_n, d_e, d_d].iter().all(|x| x.is_finite()) {
            return Err(PolicyError::Malformed("non-finite position delta".into()));
        }
        let n = q.norm();
        if !q.is_finite() || (n - 1.0).abs() >= QUATERNION_NORM_TOLERANCE {
            return Err(PolicyError::QuaternionNorm(n));
        }
        // A quaternion that is already unit to rounding is kept bit for bit,
        // so logged outputs ingest back unchanged.
        let q = if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            UnitQuaternion::try_new(q)
        } else {
            UnitQuaternion::new_normalize(q)
        }
        .map_err(|_| PolicyError::QuaternionNorm(n))?;
        Ok(Self {
            d_n: d_n.clamp(-MAX_STEP, MAX_STEP),
            d_e: d_e.clamp(-MAX_STEP, MAX_STEP),
            d_d: d_d.clamp(-MAX_STEP, MAX_STEP),
            q,
        })
    }

    pub fn delta(&self) -> Vec3 {
        Vec3::new(self.d_n, self.d_e, self.d_d)
    }

    /// `[dN, dE, dD, q0, q1, q2, q3]`
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.q.quaternion();
        [self.d_n, self.d_e, self.d_d, q.q0, q.q1, q.q2, q.q3]
    }
}

fn default_step_length() -> f64 {
    2.0
}

fn default_acceptance_radius() -> f64 {
    0.5
}

fn default_timeout() -> f64 {
    1.0
}

/// Policy description as it appears in a mission config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyKind {
    #[default]
    Hover,
    WaypointList {
        waypoints: Vec<Vec3>,
        #[serde(default = "default_step_length")]
        step_length: f64,
        #[serde(default = "default_acceptance_radius")]
        acceptance_radius: f64,
    },
    RandomExplorer {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_step_length")]
        step_length: f64,
        /// Height above D = 0 to hold, m. `None` holds the D of the first
        /// observation.
        #[serde(default)]
        altitude: Option<f64>,
    },
    Replay {
        path: PathBuf,
    },
    Remote {
        host: String,
        port: u16,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
    },
}

impl PolicyKind {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let positive = |x: f64, what: &str| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(PolicyError::Invalid(format!("{what} must be positive")))
            }
        };
        match self {
            Self::Hover | Self::Replay { .. } => Ok(()),
            Self::WaypointList {
                waypoints,
                step_length,
                acceptance_radius,
            } => {
                if waypoints.is_empty() {
                    return Err(PolicyError::Invalid("waypoint list is empty".into()));
                }
                if waypoints.iter().any(|w| !w.is_finite()) {
                    return Err(PolicyError::Invalid("non-finite waypoint".into()));
                }
                positive(*step_length, "step_length")?;
                if *step_length > MAX_STEP {
                    return Err(PolicyError::Invalid(format!("step_length exceeds {MAX_STEP} m")));
                }
                positive(*acceptance_radius, "acceptance_radius")
            }
            Self::RandomExplorer {
                step_length, altitude, ..
            } => {
                positive(*step_length, "step_length")?;
                if *step_length > MAX_STEP {
                    return Err(PolicyError::Invalid(format!("step_length exceeds {MAX_STEP} m")));
                }
                match altitude {
                    Some(a) if !a.is_finite() => Err(PolicyError::Invalid("altitude must be finite".into())),
                    _ => Ok(()),
                }
            }
            Self::Remote { port, timeout_s, .. } => {
                if *port == 0 {
                    return Err(PolicyError::Invalid("port must be non-zero".into()));
                }
                positive(*timeout_s, "timeout_s")
            }
        }
    }

    /// Builds a runnable policy. Replay logs are read here.
    pub fn build(&self) -> Result<Policy, PolicyError> {
        self.validate()?;
        Ok(match self {
            Self::Hover => Policy::Hover,
            Self::WaypointList {
                waypoints,
                step_length,
                acceptance_radius,
            } => Policy::Waypoints(WaypointPolicy::new(waypoints.clone(), *step_length, *acceptance_radius)),
            Self::RandomExplorer {
                seed,
                step_length,
                altitude,
            } => Policy::Explorer(Box::new(RandomExplorer::new(*seed, *step_length, *altitude))),
            Self::Replay { path } => {
                let outputs = crate::mission::telemetry::read_policy_outputs(path)
                    .map_err(|e| PolicyError::Invalid(format!("cannot read replay log: {e}")))?;
                Policy::Replay(ReplayPolicy::new(outputs))
            }
            Self::Remote { host, port, timeout_s } => Policy::Remote(RemotePolicy::new(
                host.clone(),
                *port,
                std::time::Duration::from_secs_f64(*timeout_s),
            )),
        })
    }
}

#[derive(Debug, Clone)]
pub struct WaypointPolicy {
    waypoints: Vec<Vec3>,
    step_length: f64,
    acceptance_radius: f64,
    active: usize,
}

impl WaypointPolicy {
    pub fn new(waypoints: Vec<Vec3>, step_length: f64, acceptance_radius: f64) -> Self {
        Self {
            waypoints,
            step_length,
            acceptance_radius,
            active: 0,
        }
    }

    /// Index of the waypoint currently steered towards. Equal to the list
    /// length once all have been reached.
    pub fn active(&self) -> usize {
        self.active
    }

    pub fn next(&mut self, obs: &Observation) -> PolicyOutput {
        let p = obs.state.position;
        while self.active < self.waypoints.len() && (self.waypoints[self.active] - p).norm() <= self.acceptance_radius {
            self.active += 1;
        }
        let Some(&goal) = self.waypoints.get(self.active).or(self.waypoints.last()) else {
            return PolicyOutput::HOVER;
        };
        let to_goal = goal - p;
        let dist = to_goal.norm();
        let delta = if dist > self.step_length {
            to_goal * (self.step_length / dist)
        } else {
            to_goal
        };
        let yaw = if to_goal.horizontal_norm() > self.acceptance_radius {
            to_goal.y.atan2(to_goal.x)
        } else {
            obs.state.orientation.yaw()
        };
        PolicyOutput {
            d_n: delta.x,
            d_e: delta.y,
            d_d: delta.z,
            q: UnitQuaternion::from_yaw(yaw),
        }
    }
}

/// Ray distance below which the explorer turns towards open space, m.
const EXPLORER_AVOID_RANGE: f64 = 8.0;
/// Standard deviation of the explorer's per-step heading change, rad.
const EXPLORER_HEADING_SD: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct RandomExplorer {
    rng: ChaCha8Rng,
    step_length: f64,
    altitude: Option<f64>,
    heading: Option<f64>,
    reference_d: Option<f64>,
}

impl RandomExplorer {
    pub fn new(seed: u64, step_length: f64, altitude: Option<f64>) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            step_length,
            altitude,
            heading: None,
            reference_d: None,
        }
    }

    pub fn next(&mut self, obs: &Observation) -> PolicyOutput {
        let yaw = obs.state.orientation.yaw();
        let p = obs.state.position;
        let d_ref = *self.reference_d.get_or_insert(p.z);
        let mut heading = match self.heading {
            Some(h) => h,
            None => self.rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        };
        let noise = Normal::new(0.0, EXPLORER_HEADING_SD).expect("constant sd");
        heading += noise.sample(&mut self.rng);

        let rays = &obs.range_sensors;
        let min_ray = rays.iter().copied().fold(f64::INFINITY, f64::min);
        if min_ray < EXPLORER_AVOID_RANGE {
            let best = rays
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &r)| if r > acc.1 { (i, r) } else { acc })
                .0;
            let open = yaw + ray_offset(best);
            let weight = 1.0 - min_ray / EXPLORER_AVOID_RANGE;
            heading += weight * wrap_angle(open - heading);
            if min_ray < 0.5 * EXPLORER_AVOID_RANGE && rays.iter().all(|&r| r < EXPLORER_AVOID_RANGE) {
                heading = yaw + std::f64::consts::PI;
            }
        }
        let heading = wrap_angle(heading);
        self.heading = Some(heading);

        let hold_d = self.altitude.map_or(d_ref, |a| -a);
        let d_d = (hold_d - p.z).clamp(-self.step_length, self.step_length);
        let (s, c) = heading.sin_cos();
        PolicyOutput {
            d_n: self.step_length * c,
            d_e: self.step_length * s,
            d_d,
            q: UnitQuaternion::from_yaw(heading),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplayPolicy {
    outputs: Vec<PolicyOutput>,
    cursor: usize,
}

impl ReplayPolicy {
    pub fn new(outputs: Vec<PolicyOutput>) -> Self {
        Self { outputs, cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// The k-th call returns the k-th logged output, one per iteration.
    pub fn next_output(&mut self) -> Result<PolicyOutput, PolicyError> {
        let out = self
            .outputs
            .get(self.cursor)
            .copied()
            .ok_or(PolicyError::Exhausted(self.outputs.len()))?;
        self.cursor += 1;
        Ok(out)
    }
}

#[derive(Debug)]
pub enum Policy {
    Hover,
    Waypoints(WaypointPolicy),
    Explorer(Box<RandomExplorer>),
    Replay(ReplayPolicy),
    Remote(RemotePolicy),
}

impl Policy {
    pub fn next(&mut self, obs: &Observation) -> Result<PolicyOutput, PolicyError> {
        match self {
            Self::Hover => Ok(PolicyOutput::HOVER),
            Self::Waypoints(p) => Ok(p.next(obs)),
            Self::Explorer(p) => Ok(p.next(obs)),
            Self::Replay(p) => p.next_output(),
            Self::Remote(p) => p.next(obs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttitudeSource {
    /// Roll and pitch from the position controller, yaw from the policy.
    #[default]
    Position,
    /// Roll, pitch and yaw all taken from the policy quaternion.
    Quaternion,
}

/// Outer position loop turning a setpoint into attitude and thrust targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuterLoopGains {
    /// Tilt per metre of horizontal error, rad/m.
    pub kp_pos: f64,
    /// Tilt per m/s of horizontal velocity, rad s/m.
    pub kv_pos: f64,
    /// Thrust per metre of altitude error.
    pub kp_alt: f64,
    /// Thrust per m/s of vertical velocity.
    pub kv_alt: f64,
    /// Roll and pitch targets are clamped to this magnitude, rad.
    pub tilt_limit: f64,
    /// Hover thrust. `None` derives it from the vehicle parameters.
    pub trim: Option<f64>,
    pub attitude_source: AttitudeSource,
}

impl Default for OuterLoopGains {
    fn default() -> Self {
        Self {
            kp_pos: 0.04,
            kv_pos: 0.1,
            kp_alt: 0.02,
            kv_alt: 0.045,
            tilt_limit: 0.35,
            trim: None,
            attitude_source: AttitudeSource::Position,
        }
    }
}

impl OuterLoopGains {
    /// Pure proportional loop, no velocity damping.
    pub fn proportional() -> Self {
        Self {
            kv_pos: 0.0,
            kv_alt: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let vals = [self.kp_pos, self.kv_pos, self.kp_alt, self.kv_alt, self.tilt_limit];
        if vals.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(PolicyError::Invalid("outer loop gains must be non-negative".into()));
        }
        if self.tilt_limit >= std::f64::consts::FRAC_PI_2 {
            return Err(PolicyError::Invalid("tilt_limit must be below pi/2".into()));
        }
        if let Some(t) = self.trim {
            if !(0.0..=1.0).contains(&t) {
                return Err(PolicyError::Invalid("trim must be in [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn trim_for(&self, params: &VehicleParams) -> f64 {
        self.trim.unwrap_or_else(|| params.hover_pwm())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetCommand {
    pub target: TargetAttitude,
    pub setpoint: Vec3,
    /// Set when the geo-fence clamped the setpoint.
    pub fenced: bool,
}

/// Attitude and thrust targets steering `state` towards `setpoint`.
///
/// Errors are resolved in the heading frame: forward error pitches the nose
/// down (negative theta), rightward error rolls right (positive phi).
pub fn track_setpoint(
    setpoint: Vec3,
    psi_t: f64,
    state: &RigidBodyState,
    gains: &OuterLoopGains,
    trim: f64,
) -> TargetAttitude {
    let err = setpoint - state.position;
    let v = state.velocity;
    let (s, c) = state.orientation.yaw().sin_cos();
    let err_fwd = c * err.x + s * err.y;
    let err_right = -s * err.x + c * err.y;
    let v_fwd = c * v.x + s * v.y;
    let v_right = -s * v.x + c * v.y;
    let lim = gains.tilt_limit;
    let theta = (-gains.kp_pos * err_fwd + gains.kv_pos * v_fwd).clamp(-lim, lim);
    let phi = (gains.kp_pos * err_right - gains.kv_pos * v_right).clamp(-lim, lim);
    let tilt = phi.cos() * theta.cos();
    let thrust = trim / tilt - gains.kp_alt * err.z + gains.kv_alt * v.z;
    TargetAttitude::new(phi, theta, psi_t, thrust)
}

/// Maps a policy output to controller targets: the setpoint is the current
/// position plus the output delta (fenced when `fence` is given), yaw comes
/// from the output quaternion, and roll, pitch and thrust from
/// [`track_setpoint`] unless the gains select [`AttitudeSource::Quaternion`].
pub fn to_target(
    output: &PolicyOutput,
    state: &RigidBodyState,
    gains: &OuterLoopGains,
    trim: f64,
    fence: Option<&World>,
) -> TargetCommand {
    let raw = state.position + output.delta();
    let (setpoint, fenced) = match fence {
        Some(w) => geo_fence(raw, w),
        None => (raw, false),
    };
    let euler = output.q.to_euler();
    let mut target = track_setpoint(setpoint, euler.yaw, state, gains, trim);
    if gains.attitude_source == AttitudeSource::Quaternion {
        let lim = gains.tilt_limit;
        target.phi_t = euler.roll.clamp(-lim, lim);
        target.theta_t = euler.pitch.clamp(-lim, lim);
    }
    TargetCommand {
        target,
        setpoint,
        fenced,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensors::ideal_reading;

    fn obs_at(p: Vec3) -> Observation {
        let s = RigidBodyState::at_rest(p);
        let imu = ideal_reading(&s, Vec3::new(0.0, 0.0, 9.81));
        Observation::open(s, imu, 0)
    }

    #[test]
    fn hover_outputs_identity() {
        let mut p = PolicyKind::Hover.build().unwrap();
        let out = p.next(&obs_at(Vec3::new(3.0, 1.0, -2.0))).unwrap();
        assert_eq!(out.to_array(), [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn waypoint_unit_step() {
        let mut p = WaypointPolicy::new(vec![Vec3::new(10.0, 0.0, 0.0)], 1.0, 0.5);
        let out = p.next(&obs_at(Vec3::ZERO));
        assert_eq!(out.to_array(), [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn waypoint_advances_and_faces_goal() {
        let wps = vec![Vec3::new(0.2, 0.0, 0.0), Vec3::new(0.0, 10.0, 0.0)];
        let mut p = WaypointPolicy::new(wps, 2.0, 0.5);
        let out = p.next(&obs_at(Vec3::ZERO));
        assert_eq!(p.active(), 1);
        assert!((out.d_e - 2.0).abs() < 1e-12 && out.d_n.abs() < 1e-12);
        assert!((out.q.yaw() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn replay_returns_logged_outputs() {
        let a = PolicyOutput::ingest(1.0, 2.0, 3.0, Quaternion::new(0.0, 1.0, 0.0, 0.0)).unwrap();
        let b = PolicyOutput::HOVER;
        let mut r = ReplayPolicy::new(vec![a, b]);
        assert_eq!(r.next_output().unwrap(), a);
        assert_eq!(r.next_output().unwrap(), b);
        assert_eq!(r.next_output(), Err(PolicyError::Exhausted(2)));
    }

    #[test]
    fn explorer_is_seeded() {
        let run = |seed| {
            let mut e = RandomExplorer::new(seed, 1.0, None);
            (0..50).map(|_| e.next(&obs_at(Vec3::ZERO)).to_array()).collect::<Vec<_>>()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn explorer_turns_away_from_obstacles() {
        let mut e = RandomExplorer::new(1, 1.0, None);
        let mut obs = obs_at(Vec3::ZERO);
        obs.range_sensors = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 50.0];
        e.heading = Some(0.0);
        let out = e.next(&obs);
        // Rightmost ray is open; heading swings well towards +70 deg.
        assert!(out.q.yaw() > 0.6, "{}", out.q.yaw());
    }

    #[test]
    fn ingestion_rules() {
        let out = PolicyOutput::ingest(0.0, 0.0, 0.0, Quaternion::new(1.2, 0.0, 0.0, 0.0)).unwrap();
        assert!((out.q.quaternion().norm() - 1.0).abs() < 1e-12);
        assert!(matches!(
            PolicyOutput::ingest(0.0, 0.0, 0.0, Quaternion::new(0.2, 0.0, 0.0, 0.0)),
            Err(PolicyError::QuaternionNorm(_))
        ));
        assert!(matches!(
            PolicyOutput::ingest(0.0, 0.0, 0.0, Quaternion::new(1.6, 0.0, 0.0, 0.0)),
            Err(PolicyError::QuaternionNorm(_))
        ));
        let big = PolicyOutput::ingest(80.0, -70.0, 3.0, Quaternion::IDENTITY).unwrap();
        assert_eq!((big.d_n, big.d_e, big.d_d), (50.0, -50.0, 3.0));
        assert!(PolicyOutput::ingest(f64::NAN, 0.0, 0.0, Quaternion::IDENTITY).is_err());

        let yawed = UnitQuaternion::from_yaw(0.4636476090008061).quaternion();
        let again = PolicyOutput::ingest(0.0, 0.0, 0.0, yawed).unwrap();
        assert_eq!(again.q.quaternion(), yawed);
    }

    #[test]
    fn output_json_shape() {
        let out = PolicyOutput::ingest(1.0, -2.0, 0.5, Quaternion::IDENTITY).unwrap();
        let s = serde_json::to_string(&out).unwrap();
        assert_eq!(s, r#"{"dN":1.0,"dE":-2.0,"dD":0.5,"q":[1.0,0.0,0.0,0.0]}"#);
        let back: PolicyOutput = serde_json::from_str(&s).unwrap();
        assert_eq!(back, out);
        assert!(serde_json::from_str::<PolicyOutput>(r#"{"dN":1,"dE":0,"dD":0,"q":[0.2,0,0,0]}"#).is_err());
        assert!(serde_json::from_str::<PolicyOutput>(r#"{"dN":1,"dE":0,"q":[1,0,0,0]}"#).is_err());
    }

    fn hover_state() -> RigidBodyState {
        RigidBodyState::at_rest(Vec3::new(0.0, 0.0, -5.0))
    }

    #[test]
    fn target_at_hover() {
        let g = OuterLoopGains::default();
        let s = hover_state();
        let cmd = to_target(&PolicyOutput::HOVER, &s, &g, 0.5, None);
        assert_eq!(cmd.target, TargetAttitude::new(0.0, 0.0, 0.0, 0.5));
        assert_eq!(cmd.setpoint, s.position);
        assert!(!cmd.fenced);
    }

    #[test]
    fn forward_delta_pitches_nose_down() {
        let g = OuterLoopGains::default();
        let out = PolicyOutput {
            d_n: 5.0,
            ..PolicyOutput::HOVER
        };
        let t = to_target(&out, &hover_state(), &g, 0.5, None).target;
        assert!((t.theta_t + 0.2).abs() < 1e-12);
        assert_eq!(t.phi_t, 0.0);
    }

    #[test]
    fn climb_adds_thrust() {
        let g = OuterLoopGains::default();
        let out = PolicyOutput {
            d_d: -2.0,
            ..PolicyOutput::HOVER
        };
        let t = to_target(&out, &hover_state(), &g, 0.5, None).target;
        assert!((t.thrust_cmd - (0.5 + 2.0 * 0.02)).abs() < 1e-12);
    }

    #[test]
    fn tilt_and_thrust_clamped() {
        let g = OuterLoopGains::default();
        let out = PolicyOutput::ingest(50.0, -50.0, -50.0, Quaternion::IDENTITY).unwrap();
        let t = to_target(&out, &hover_state(), &g, 0.5, None).target;
        assert_eq!(t.theta_t, -0.35);
        assert_eq!(t.phi_t, -0.35);
        assert_eq!(t.thrust_cmd, 1.0);
    }

    #[test]
    fn heading_frame_rotation() {
        // Facing east, a northward error is to the vehicle's left.
        let g = OuterLoopGains::default();
        let mut s = hover_state();
        s.orientation = UnitQuaternion::from_yaw(std::f64::consts::FRAC_PI_2);
        let out = PolicyOutput {
            d_n: 5.0,
            q: s.orientation,
            ..PolicyOutput::HOVER
        };
        let t = to_target(&out, &s, &g, 0.5, None).target;
        assert!((t.phi_t + 0.2).abs() < 1e-12);
        assert!(t.theta_t.abs() < 1e-12);
        assert!((t.psi_t - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn quaternion_attitude_source() {
        let g = OuterLoopGains {
            attitude_source: AttitudeSource::Quaternion,
            ..OuterLoopGains::default()
        };
        let out = PolicyOutput {
            q: UnitQuaternion::from_euler(0.1, -0.05, 0.3),
            ..PolicyOutput::HOVER
        };
        let t = to_target(&out, &hover_state(), &g, 0.5, None).target;
        assert!((t.phi_t - 0.1).abs() < 1e-12);
        assert!((t.theta_t + 0.05).abs() < 1e-12);
        assert!((t.psi_t - 0.3).abs() < 1e-12);
    }

    #[test]
    fn kinds_validate() {
        let bad = PolicyKind::WaypointList {
            waypoints: vec![],
            step_length: 1.0,
            acceptance_radius: 0.5,
        };
        assert!(bad.validate().is_err());
        let bad = PolicyKind::RandomExplorer {
            seed: 0,
            step_length: -1.0,
            altitude: None,
        };
        assert!(bad.validate().is_err());
        let json = r#"{"kind":"waypoint_list","waypoints":[[1,2,3]]}"#;
        let k: PolicyKind = serde_json::from_str(json).unwrap();
        assert!(k.validate().is_ok());
        let json = r#"{"kind":"remote","host":"127.0.0.1","port":9000}"#;
        let k: PolicyKind = serde_json::from_str(json).unwrap();
        assert_eq!(
            k,
            PolicyKind::Remote {
                host: "127.0.0.1".into(),
                port: 9000,
                timeout_s: 1.0
            }
        );
    }
}
