//! The mission loop: observe, ask the policy, fence and track the setpoint,
//! run the controller and flight model, record.

pub mod telemetry;
pub mod world;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::control::{ControllerGains, ControllerState, EstimatedAttitude};
use crate::dynamics::{
    apply_ground_contact, step_with_phases, DynamicsError, MotorCommands, RigidBodyState, VehicleParams, Wind,
    MAX_DT,
};
use crate::geom::{UnitQuaternion, Vec3};
use crate::policy::{to_target, Observation, OuterLoopGains, PolicyError, PolicyKind};
use crate::sensors::{ideal_reading, Imu, SensorConfig};
use telemetry::{Fault, Header, Intervention, TelemetryRecord};
use world::{detect_intervention, World, WorldError, WorldSpec};

/// Safe states remembered for intervention resets.
pub const SAFE_HISTORY_DEPTH: usize = 20;

/// Alternative start pose used by the long missions.
pub const ALT_START: Vec3 = Vec3::new(70.0, -450.0, -12.0);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MissionError {
    #[error("invalid mission config: {0}")]
    Config(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("no safe state to reset to")]
    NoSafeState,
}

fn default_iterations() -> u64 {
    150
}

fn default_dt() -> f64 {
    0.05
}

fn default_substeps() -> u32 {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissionConfig {
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    /// Policy period, s.
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Control and flight-model ticks per policy step.
    #[serde(default = "default_substeps")]
    pub substeps: u32,
    #[serde(default)]
    pub start: Vec3,
    #[serde(default)]
    pub start_yaw: f64,
    #[serde(default = "default_true")]
    pub geo_fence_enabled: bool,
    #[serde(default)]
    pub world: WorldSpec,
    #[serde(default)]
    pub policy: PolicyKind,
    #[serde(default)]
    pub vehicle: VehicleParams,
    #[serde(default)]
    pub wind: Wind,
    #[serde(default)]
    pub sensors: SensorConfig,
    #[serde(default)]
    pub gains: ControllerGains,
    #[serde(default)]
    pub outer_loop: OuterLoopGains,
    /// Mixed into the sensor, wind and explorer seeds. The world keeps its
    /// own seed so that runs with different mission seeds share a frame.
    #[serde(default)]
    pub seed: u64,
}

impl Default for MissionConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for one random stream, derived from the mission seed.
pub fn derive_seed(mission_seed: u64, base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(mission_seed ^ splitmix64(stream)))
}

const SENSOR_STREAM: u64 = 1;
const WIND_STREAM: u64 = 2;
const POLICY_STREAM: u64 = 3;

impl MissionConfig {
    pub fn validate(&self) -> Result<(), MissionError> {
        let bad = |m: &str| Err(MissionError::Config(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if !(self.dt > 0.0 && self.dt <= MAX_DT) {
            return bad("dt must be in (0, 0.1]");
        }
        if self.substeps == 0 {
            return bad("substeps must be positive");
        }
        if !self.start.is_finite() || !self.start_yaw.is_finite() {
            return bad("start pose must be finite");
        }
        self.vehicle.validate()?;
        self.wind.validate()?;
        self.sensors.validate().map_err(|e| MissionError::Config(e.to_string()))?;
        self.gains.validate().map_err(|e| MissionError::Config(e.to_string()))?;
        self.outer_loop.validate()?;
        self.policy.validate()?;
        Ok(())
    }

    /// Config with the mission seed folded into each random stream.
    pub fn seeded(&self) -> MissionConfig {
        let mut c = self.clone();
        c.sensors.seed = derive_seed(self.seed, self.sensors.seed, SENSOR_STREAM);
        c.wind.seed = derive_seed(self.seed, self.wind.seed, WIND_STREAM);
        if let PolicyKind::RandomExplorer { seed, .. } = &mut c.policy {
            *seed = derive_seed(self.seed, *seed, POLICY_STREAM);
        }
        c
    }
}

/// Result of a run. A mission that aborted carries its partial log and the
/// fault that stopped it.
#[derive(Debug, Clone, PartialEq)]
pub struct MissionOutcome {
    pub header: Header,
    pub records: Vec<TelemetryRecord>,
    pub fault: Option<Fault>,
}

impl MissionOutcome {
    pub fn aborted(&self) -> bool {
        self.fault.is_some()
    }

    pub fn write<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        telemetry::write_log(out, &self.header, &self.records, self.fault.as_ref())
    }
}

/// Recent states that triggered no intervention, newest last.
#[derive(Debug, Clone, Default)]
pub struct SafeHistory {
    states: VecDeque<RigidBodyState>,
}

impl SafeHistory {
    pub fn push(&mut self, s: RigidBodyState) {
        if self.states.len() == SAFE_HISTORY_DEPTH {
            self.states.pop_front();
        }
        self.states.push_back(s);
    }

    pub fn latest(&self) -> Option<&RigidBodyState> {
        self.states.back()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Reset after an intervention: the most recent safe position, at rest, level,
/// keeping that state's heading.
pub fn handle_intervention(history: &SafeHistory) -> Result<RigidBodyState, MissionError> {
    let safe = history.latest().ok_or(MissionError::NoSafeState)?;
    let mut s = RigidBodyState::at_rest(safe.position);
    s.orientation = UnitQuaternion::from_yaw(safe.orientation.yaw());
    s.time = safe.time;
    Ok(s)
}

fn fault(iteration: u64, err: &MissionError) -> Fault {
    let cause = match err {
        MissionError::Policy(p) => p.cause(),
        MissionError::Dynamics(_) => "dynamics",
        MissionError::NoSafeState => "no safe state",
        MissionError::World(_) | MissionError::Config(_) => "config",
    };
    Fault {
        iteration,
        cause: cause.into(),
        message: err.to_string(),
    }
}

/// Runs a mission to completion or abort. Config and world errors are
/// returned directly; failures during flight end the log with a fault.
pub fn run_mission(config: &MissionConfig) -> Result<MissionOutcome, MissionError> {
    config.validate()?;
    let world = config.world.build()?;
    run_mission_in(config, &world)
}

/// [`run_mission`] in an already built world.
pub fn run_mission_in(config: &MissionConfig, world: &World) -> Result<MissionOutcome, MissionError> {
    config.validate()?;
    let cfg = config.seeded();
    let mut policy = cfg.policy.build()?;
    let params = &cfg.vehicle;
    let trim = cfg.outer_loop.trim_for(params);
    let wind_phases = cfg.wind.phases();
    let h = cfg.dt / cfg.substeps as f64;
    let fence = cfg.geo_fence_enabled.then_some(world);

    let mut imu = Imu::new(cfg.sensors.clone());
    let mut ctrl = ControllerState::new(cfg.sensors.lowpass_alpha);
    let mut state = RigidBodyState::at_rest(cfg.start);
    state.orientation = UnitQuaternion::from_yaw(cfg.start_yaw);
    ctrl.reset(EstimatedAttitude {
        psi_bar: cfg.start_yaw,
        ..EstimatedAttitude::default()
    });
    let mut reading = ideal_reading(&state, params.gravity);
    let mut motors = MotorCommands::uniform(trim);
    let mut history = SafeHistory::default();
    let mut prev: Option<(Vec3, bool)> = None;

    let header = Header::new(world.name(), world.seed, cfg.dt);
    let mut records = Vec::with_capacity(cfg.iterations as usize);

    for k in 0..cfg.iterations {
        state.time = k as f64 * cfg.dt;
        let kind = detect_intervention(&state, world, cfg.geo_fence_enabled);
        let distance_increment = match prev {
            Some((p, false)) => (state.position - p).norm(),
            _ => 0.0,
        };
        prev = Some((state.position, kind.is_some()));

        let obs = Observation::sense(state, reading, world, k);
        let output = match policy.next(&obs) {
            Ok(o) => o,
            Err(e) => {
                let err = MissionError::Policy(e);
                log::warn!("iteration {k}: mission aborted: {err}");
                return Ok(finish(header, records, Some(fault(k, &err))));
            }
        };
        let cmd = to_target(&output, &state, &cfg.outer_loop, trim, fence);
        let record_base = |motors: MotorCommands, ctrl: &ControllerState| TelemetryRecord {
            iteration: k,
            time: state.time,
            state,
            policy_output: output,
            target_attitude: cmd.target,
            setpoint: cmd.setpoint,
            fenced: cmd.fenced,
            motor_commands: motors,
            intervention: Intervention::from_kind(kind),
            distance_increment,
            saturations: ctrl.saturation,
        };

        if kind.is_some() {
            log::debug!("iteration {k}: {kind:?} at {:?}", state.position);
            records.push(record_base(motors, &ctrl));
            state = match handle_intervention(&history) {
                Ok(s) => s,
                Err(err) => return Ok(finish(header, records, Some(fault(k, &err)))),
            };
            ctrl.reset(EstimatedAttitude {
                psi_bar: state.orientation.yaw(),
                ..EstimatedAttitude::default()
            });
            reading = ideal_reading(&state, params.gravity);
            continue;
        }

        history.push(state);
        let mut next = state;
        let mut failure = None;
        for _ in 0..cfg.substeps {
            reading = imu.read(&next, params);
            motors = crate::control::control_step(&cmd.target, &reading, &cfg.gains, &mut ctrl, h);
            match step_with_phases(&next, &motors, params, &cfg.wind, wind_phases, h) {
                Ok(mut s) => {
                    let ground = world.ground_d(s.position.x, s.position.y);
                    apply_ground_contact(&mut s, ground);
                    next = s;
                }
                Err(e) => {
                    failure = Some(MissionError::Dynamics(e));
                    break;
                }
            }
        }
        records.push(record_base(motors, &ctrl));
        if let Some(err) = failure {
            log::warn!("iteration {k}: mission aborted: {err}");
            return Ok(finish(header, records, Some(fault(k, &err))));
        }
        state = next;
    }
    Ok(finish(header, records, None))
}

fn finish(header: Header, records: Vec<TelemetryRecord>, fault: Option<Fault>) -> MissionOutcome {
    MissionOutcome { header, records, fault }
}

#[cfg(test)]
mod tests {
    use super::*;
    use world::{Bounds, Cylinder, WorldKind};

    fn quiet(iterations: u64) -> MissionConfig {
        MissionConfig {
            iterations,
            sensors: SensorConfig::noiseless(),
            ..MissionConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        let c = MissionConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!((c.iterations, c.dt, c.substeps), (150, 0.05, 4));
    }

    #[test]
    fn config_rejects_bad_values() {
        for c in [
            MissionConfig {
                iterations: 0,
                ..MissionConfig::default()
            },
            MissionConfig {
                dt: 0.2,
                ..MissionConfig::default()
            },
        ] {
            assert!(matches!(c.validate(), Err(MissionError::Config(_))));
        }
        assert!(serde_json::from_str::<MissionConfig>(r#"{"iterationz":3}"#).is_err());
    }

    #[test]
    fn record_count_and_time() {
        let out = run_mission(&quiet(40)).unwrap();
        assert_eq!(out.records.len(), 40);
        for (k, r) in out.records.iter().enumerate() {
            assert_eq!(r.iteration, k as u64);
            assert!((r.time - k as f64 * 0.05).abs() < 1e-12);
            assert!(r.distance_increment >= 0.0);
        }
        assert!(!out.aborted());
    }

    #[test]
    fn collision_resets_to_last_safe_state() {
        let tree = Cylinder {
            north: 6.0,
            east: 0.0,
            radius: 0.5,
            height: 30.0,
        };
        let w = World::new(WorldKind::Custom, vec![tree], -50.0, Bounds::square(100.0), 0).unwrap();
        let cfg = MissionConfig {
            iterations: 400,
            start: Vec3::new(0.0, 0.0, -3.0),
            policy: PolicyKind::WaypointList {
                waypoints: vec![Vec3::new(20.0, 0.0, -3.0)],
                step_length: 2.0,
                acceptance_radius: 0.5,
            },
            ..quiet(400)
        };
        let out = run_mission_in(&cfg, &w).unwrap();
        let k = out
            .records
            .iter()
            .position(|r| r.intervention.flag)
            .expect("flies into the trunk");
        assert_eq!(out.records[k].intervention.kind, world::InterventionKind::Collision);
        let before = &out.records[k - 1].state;
        let after = &out.records[k + 1].state;
        assert_eq!(after.position, before.position);
        assert_eq!(after.velocity, Vec3::ZERO);
        assert_eq!(out.records[k + 1].distance_increment, 0.0);
    }

    #[test]
    fn collision_at_start_aborts() {
        let tree = Cylinder {
            north: 0.0,
            east: 0.0,
            radius: 0.5,
            height: 30.0,
        };
        let w = World::new(WorldKind::Custom, vec![tree], -50.0, Bounds::square(100.0), 0).unwrap();
        let out = run_mission_in(&quiet(10), &w).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.fault.unwrap().cause, "no safe state");
    }

    #[test]
    fn seeds_feed_every_stream() {
        let base = MissionConfig::default();
        let a = MissionConfig { seed: 1, ..base.clone() }.seeded();
        let b = MissionConfig { seed: 2, ..base }.seeded();
        assert_ne!(a.sensors.seed, b.sensors.seed);
        assert_ne!(a.wind.seed, b.wind.seed);
        assert_eq!(a.world.seed, b.world.seed);
    }

    #[test]
    fn history_is_bounded() {
        let mut h = SafeHistory::default();
        for i in 0..50 {
            h.push(RigidBodyState::at_rest(Vec3::new(i as f64, 0.0, 0.0)));
        }
        assert_eq!(h.len(), SAFE_HISTORY_DEPTH);
        assert_eq!(h.latest().unwrap().position.x, 49.0);
        let s = handle_intervention(&h).unwrap();
        assert_eq!(s.position.x, 49.0);
        assert!(handle_intervention(&SafeHistory::default()).is_err());
    }
}
