//! JSON Lines telemetry: a schema header, one record per iteration and an
//! optional fault trailer.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::world::InterventionKind;
use crate::control::{SaturationCounters, TargetAttitude};
use crate::dynamics::{MotorCommands, RigidBodyState};
use crate::geom::Vec3;
use crate::policy::PolicyOutput;

pub const SCHEMA: &str = "telemetry/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema: String,
    pub world: String,
    pub world_seed: u64,
    pub dt: f64,
}

impl Header {
    pub fn new(world: &str, world_seed: u64, dt: f64) -> Self {
        Self {
            schema: SCHEMA.into(),
            world: world.into(),
            world_seed,
            dt,
        }
    }

    /// Two logs share a frame when they were flown in the same world.
    pub fn same_frame(&self, other: &Header) -> bool {
        self.world == other.world && self.world_seed == other.world_seed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Intervention {
    pub flag: bool,
    pub kind: InterventionKind,
}

impl Intervention {
    pub fn from_kind(kind: InterventionKind) -> Self {
        Self {
            flag: kind.is_some(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub iteration: u64,
    pub time: f64,
    /// Vehicle state at the start of the iteration.
    pub state: RigidBodyState,
    pub policy_output: PolicyOutput,
    pub target_attitude: TargetAttitude,
    pub setpoint: Vec3,
    /// Set when the geo-fence clamped this iteration's setpoint.
    pub fenced: bool,
    /// Commands of the last control tick in the iteration.
    pub motor_commands: MotorCommands,
    pub intervention: Intervention,
    /// Path length since the previous record, 0 after a reset.
    pub distance_increment: f64,
    /// Cumulative controller saturation counts.
    pub saturations: SaturationCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub iteration: u64,
    pub cause: String,
    pub message: String,
}

#[derive(Serialize, Deserialize)]
struct FaultLine {
    fault: Fault,
}

/// A parsed log. Lines that fail to parse are counted, not fatal.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TelemetryLog {
    pub header: Option<Header>,
    pub records: Vec<TelemetryRecord>,
    pub fault: Option<Fault>,
    pub corrupt_lines: usize,
    pub total_lines: usize,
}

impl TelemetryLog {
    pub fn corrupt_fraction(&self) -> f64 {
        if self.total_lines == 0 {
            0.0
        } else {
            self.corrupt_lines as f64 / self.total_lines as f64
        }
    }
}

fn write_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(io::Error::other)?;
    out.write_all(b"\n")
}

pub fn write_log<W: Write>(
    mut out: W,
    header: &Header,
    records: &[TelemetryRecord],
    fault: Option<&Fault>,
) -> io::Result<()> {
    write_line(&mut out, header)?;
    for r in records {
        write_line(&mut out, r)?;
    }
    if let Some(f) = fault {
        write_line(&mut out, &FaultLine { fault: f.clone() })?;
    }
    out.flush()
}

pub fn write_log_file(
    path: &Path,
    header: &Header,
    records: &[TelemetryRecord],
    fault: Option<&Fault>,
) -> io::Result<()> {
    write_log(BufWriter::new(File::create(path)?), header, records, fault)
}

pub fn parse_log<R: BufRead>(input: R) -> io::Result<TelemetryLog> {
    let mut log = TelemetryLog::default();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        log.total_lines += 1;
        if i == 0 || log.header.is_none() && log.records.is_empty() {
            if let Ok(h) = serde_json::from_str::<Header>(&line) {
                if h.schema == SCHEMA {
                    log.header = Some(h);
                    continue;
                }
                log::warn!("line {}: unsupported schema {:?}", i + 1, h.schema);
            }
        }
        if let Ok(r) = serde_json::from_str::<TelemetryRecord>(&line) {
            log.records.push(r);
        } else if let Ok(f) = serde_json::from_str::<FaultLine>(&line) {
            log.fault = Some(f.fault);
        } else {
            log::warn!("line {}: skipping unparseable telemetry", i + 1);
            log.corrupt_lines += 1;
        }
    }
    Ok(log)
}

pub fn read_log(path: &Path) -> io::Result<TelemetryLog> {
    parse_log(BufReader::new(File::open(path)?))
}

/// Policy outputs of every record in order, for replay.
pub fn read_policy_outputs(path: &Path) -> io::Result<Vec<PolicyOutput>> {
    let log = read_log(path)?;
    if log.corrupt_lines > 0 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{} corrupt lines", log.corrupt_lines),
        ));
    }
    Ok(log.records.into_iter().map(|r| r.policy_output).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: u64) -> TelemetryRecord {
        TelemetryRecord {
            iteration: i,
            time: i as f64 * 0.05,
            state: RigidBodyState::at_rest(Vec3::new(0.1 * i as f64, 1.0 / 3.0, -2.0)),
            policy_output: PolicyOutput::HOVER,
            target_attitude: TargetAttitude::new(0.01, -0.02, 0.3, 0.5),
            setpoint: Vec3::new(1.0, 2.0, -2.0),
            fenced: false,
            motor_commands: MotorCommands::new(0.5, 0.6, 0.4, 0.5),
            intervention: Intervention::default(),
            distance_increment: 0.1,
            saturations: SaturationCounters::default(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let header = Header::new("forest", 7, 0.05);
        let records: Vec<_> = (0..5).map(record).collect();
        let fault = Fault {
            iteration: 4,
            cause: "timeout".into(),
            message: "no reply".into(),
        };
        let mut buf = Vec::new();
        write_log(&mut buf, &header, &records, Some(&fault)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"schema":"telemetry/1","world":"forest","world_seed":7,"dt":0.05}"#));
        let log = parse_log(buf.as_slice()).unwrap();
        assert_eq!(log.header, Some(header));
        assert_eq!(log.records, records);
        assert_eq!(log.fault, Some(fault));
        assert_eq!(log.corrupt_lines, 0);
    }

    #[test]
    fn corrupt_lines_are_counted() {
        let mut buf = Vec::new();
        write_log(&mut buf, &Header::new("plain_field", 0, 0.05), &[record(0), record(1)], None).unwrap();
        buf.extend_from_slice(b"{not json\n");
        let log = parse_log(buf.as_slice()).unwrap();
        assert_eq!(log.records.len(), 2);
        assert_eq!(log.corrupt_lines, 1);
        assert_eq!(log.total_lines, 4);
    }

    #[test]
    fn intervention_serializes_flag_and_kind() {
        let v = serde_json::to_value(Intervention::from_kind(InterventionKind::FenceBreach)).unwrap();
        assert_eq!(v, serde_json::json!({"flag": true, "kind": "fence_breach"}));
    }
}
