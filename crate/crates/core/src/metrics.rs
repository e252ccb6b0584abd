//! Scores for mission logs: interventions, reliability, distance, behaviour
//! labels, route superposition and policy-output dispersion.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geom::{wrap_angle, Vec3};
use crate::mission::telemetry::{Header, TelemetryLog, TelemetryRecord};

/// Distance debited from the travelled distance for each intervention, m.
pub const INTERVENTION_CHARGE: f64 = 1.0;

/// Percentage of the distance flown without interventions,
/// `100 (1 - NI * charge / distance)`, floored at 0. Undefined (`None`) when
/// nothing was flown and nothing went wrong.
pub fn reliability(distance: f64, ni: u64) -> Option<f64> {
    if !(distance > 0.0) || !distance.is_finite() {
        return if ni == 0 { None } else { Some(0.0) };
    }
    Some((100.0 * (1.0 - ni as f64 * INTERVENTION_CHARGE / distance)).max(0.0))
}

/// Number of records flagged as interventions.
pub fn intervention_count(records: &[TelemetryRecord]) -> u64 {
    records.iter().filter(|r| r.intervention.flag).count() as u64
}

/// Polyline length of the recorded positions. The segment leaving an
/// intervention record is the reset jump and is not counted.
pub fn total_distance(records: &[TelemetryRecord]) -> f64 {
    records
        .windows(2)
        .filter(|w| !w[0].intervention.flag)
        .map(|w| (w[1].state.position - w[0].state.position).norm())
        .sum()
}

fn horizontal_path(records: &[TelemetryRecord]) -> f64 {
    records
        .windows(2)
        .filter(|w| !w[0].intervention.flag)
        .map(|w| (w[1].state.position - w[0].state.position).horizontal_norm())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behaviour {
    Flying,
    Hovering,
    Drifting,
}

impl Behaviour {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Flying => "flying",
            Self::Hovering => "hovering",
            Self::Drifting => "drifting",
        }
    }
}

impl std::fmt::Display for Behaviour {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviourThresholds {
    /// Largest horizontal excursion from the start still counted as hover, m.
    pub hover_displacement: f64,
    /// Mean horizontal speed below which a displaced run is drifting, m/s.
    pub drift_speed: f64,
    /// Minimum ratio of net to chunked horizontal travel for a constant
    /// drift direction.
    pub drift_straightness: f64,
    /// The log is cut into this many chunks for the direction test.
    pub chunks: usize,
    /// Shorter logs are not classified.
    pub min_records: usize,
}

impl Default for BehaviourThresholds {
    fn default() -> Self {
        Self {
            hover_displacement: 2.0,
            drift_speed: 0.2,
            drift_straightness: 0.8,
            chunks: 10,
            min_records: 100,
        }
    }
}

/// Labels a log. `None` when it has fewer than `min_records` records.
///
/// * hovering: the horizontal position never leaves a `hover_displacement`
///   circle around the start;
/// * drifting: it does, but slowly (mean horizontal speed below
///   `drift_speed`) and along a constant direction;
/// * flying: anything else.
pub fn classify_behaviour(records: &[TelemetryRecord], dt: f64, th: &BehaviourThresholds) -> Option<Behaviour> {
    if records.len() < th.min_records.max(2) {
        return None;
    }
    let start = records[0].state.position;
    let excursion = records
        .iter()
        .map(|r| (r.state.position - start).horizontal_norm())
        .fold(0.0, f64::max);
    if excursion < th.hover_displacement {
        return Some(Behaviour::Hovering);
    }
    let duration = (records.len() - 1) as f64 * dt;
    let speed = horizontal_path(records) / duration;
    if speed >= th.drift_speed {
        return Some(Behaviour::Flying);
    }
    let n = th.chunks.clamp(1, records.len() - 1);
    let bounds: Vec<usize> = (0..=n).map(|i| i * (records.len() - 1) / n).collect();
    let mut net = Vec3::ZERO;
    let mut sum = 0.0;
    for w in bounds.windows(2) {
        let mut d = records[w[1]].state.position - records[w[0]].state.position;
        d.z = 0.0;
        net += d;
        sum += d.norm();
    }
    if sum > 0.0 && net.norm() / sum >= th.drift_straightness {
        Some(Behaviour::Drifting)
    } else {
        Some(Behaviour::Flying)
    }
}

fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionStats {
    /// Population variance of the lateral (E) deltas, m^2.
    pub y_delta_variance: f64,
    /// Smallest and largest forward (N) delta, m.
    pub x_delta_range: [f64; 2],
    /// RMS of successive yaw-target changes, rad.
    pub heading_change_rms: f64,
}

/// Statistics over the policy outputs of a log.
pub fn dispersion_stats(records: &[TelemetryRecord]) -> DispersionStats {
    let de: Vec<f64> = records.iter().map(|r| r.policy_output.d_e).collect();
    let dn = records.iter().map(|r| r.policy_output.d_n);
    let x_delta_range = if records.is_empty() {
        [0.0, 0.0]
    } else {
        dn.fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], x| [lo.min(x), hi.max(x)])
    };
    let turns: Vec<f64> = records
        .windows(2)
        .map(|w| wrap_angle(w[1].target_attitude.psi_t - w[0].target_attitude.psi_t))
        .collect();
    let heading_change_rms = if turns.is_empty() {
        0.0
    } else {
        (turns.iter().map(|t| t * t).sum::<f64>() / turns.len() as f64).sqrt()
    };
    DispersionStats {
        y_delta_variance: population_variance(&de),
        x_delta_range,
        heading_change_rms,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionSummary {
    #[serde(rename = "NI")]
    pub ni: u64,
    /// Percent; `None` renders as a dash.
    pub reliability: Option<f64>,
    pub iterations: u64,
    pub duration_s: f64,
    pub duration_min: f64,
    pub distance: f64,
    pub behaviour: Option<Behaviour>,
    pub y_delta_variance: f64,
    pub x_delta_range: [f64; 2],
    pub heading_change_rms: f64,
    pub aborted: bool,
}

/// Everything above for one log. Duration is simulated time, records x dt.
/// A run with no interventions that hovered in place has no meaningful
/// reliability and reports a dash.
pub fn summarize(records: &[TelemetryRecord], dt: f64, aborted: bool, th: &BehaviourThresholds) -> MissionSummary {
    let ni = intervention_count(records);
    let distance = total_distance(records);
    let behaviour = classify_behaviour(records, dt, th);
    let reliability = if ni == 0 && behaviour == Some(Behaviour::Hovering) {
        None
    } else {
        reliability(distance, ni)
    };
    let d = dispersion_stats(records);
    let duration_s = records.len() as f64 * dt;
    MissionSummary {
        ni,
        reliability,
        iterations: records.len() as u64,
        duration_s,
        duration_min: duration_s / 60.0,
        distance,
        behaviour,
        y_delta_variance: d.y_delta_variance,
        x_delta_range: d.x_delta_range,
        heading_change_rms: d.heading_change_rms,
        aborted,
    }
}

/// [`summarize`] for a parsed log, using its header's time step.
pub fn summarize_log(log: &TelemetryLog, default_dt: f64, th: &BehaviourThresholds) -> MissionSummary {
    let dt = log.header.as_ref().map_or(default_dt, |h| h.dt);
    summarize(&log.records, dt, log.fault.is_some(), th)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "—".to_owned(), |x| format!("{x:.2}"))
}

/// Aligned text table: Run, NI, Reliability, Duration, Distance, Behaviour.
pub fn format_table(rows: &[(String, MissionSummary)]) -> String {
    let header = ["Run", "NI", "Reliability", "Duration", "Distance (m)", "Behaviour"];
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|(name, s)| {
            [
                name.clone(),
                s.ni.to_string(),
                fmt_opt(s.reliability),
                format!("{:.2} min", s.duration_min),
                format!("{:.2}", s.distance),
                s.behaviour.map_or("—", |b| b.as_str()).to_owned(),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[String]| {
        let parts: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &header.map(String::from));
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut out, &rule);
    for row in &cells {
        line(&mut out, row);
    }
    out
}

/// Histogram of visited cells over the union bounding box of several runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub cell_size: f64,
    /// N/E corner of cell (0, 0); D is always 0.
    pub origin: Vec3,
    /// `counts[i][j]`: runs that visited the cell at north index `i`, east
    /// index `j`.
    pub counts: Vec<Vec<u32>>,
}

impl OccupancyGrid {
    pub fn rows(&self) -> usize {
        self.counts.len()
    }

    pub fn cols(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    /// Rows of comma-separated counts, north index ascending.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(u32::to_string).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Superposition {
    pub grid: OccupancyGrid,
    /// Cells visited by every run over cells visited by any run.
    pub consistency: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SuperposeError {
    #[error("need at least 2 logs, got {0}")]
    TooFew(usize),
    #[error("logs are from different worlds: {0} vs {1}")]
    FrameMismatch(String, String),
    #[error("cell size must be positive")]
    CellSize,
}

type Cell = (i64, i64);

/// Cells touched by the flown path, sampling each segment at a quarter cell.
pub fn visited_cells(records: &[TelemetryRecord], cell_size: f64) -> BTreeSet<Cell> {
    let cell = |p: Vec3| ((p.x / cell_size).floor() as i64, (p.y / cell_size).floor() as i64);
    let mut out = BTreeSet::new();
    for (i, r) in records.iter().enumerate() {
        let p = r.state.position;
        out.insert(cell(p));
        if i == 0 || records[i - 1].intervention.flag {
            continue;
        }
        let a = records[i - 1].state.position;
        let span = (p - a).horizontal_norm();
        let n = (span / (0.25 * cell_size)).ceil() as usize;
        for k in 1..n {
            out.insert(cell(a + (p - a) * (k as f64 / n as f64)));
        }
    }
    out
}

/// Superposes runs on one grid and scores how consistently they repeat.
pub fn superpose(runs: &[&[TelemetryRecord]], cell_size: f64) -> Result<Superposition, SuperposeError> {
    if runs.len() < 2 {
        return Err(SuperposeError::TooFew(runs.len()));
    }
    if !(cell_size > 0.0) {
        return Err(SuperposeError::CellSize);
    }
    let sets: Vec<BTreeSet<Cell>> = runs.iter().map(|r| visited_cells(r, cell_size)).collect();
    let mut counts: BTreeMap<Cell, u32> = BTreeMap::new();
    for s in &sets {
        for c in s {
            *counts.entry(*c).or_default() += 1;
        }
    }
    let union = counts.len();
    let all = counts.values().filter(|&&n| n as usize == runs.len()).count();
    let consistency = if union == 0 { 1.0 } else { all as f64 / union as f64 };

    let grid = match (
        counts.keys().map(|c| c.0).min(),
        counts.keys().map(|c| c.0).max(),
        counts.keys().map(|c| c.1).min(),
        counts.keys().map(|c| c.1).max(),
    ) {
        (Some(n0), Some(n1), Some(e0), Some(e1)) => {
            let mut m = vec![vec![0u32; (e1 - e0 + 1) as usize]; (n1 - n0 + 1) as usize];
            for (&(n, e), &k) in &counts {
                m[(n - n0) as usize][(e - e0) as usize] = k;
            }
            OccupancyGrid {
                cell_size,
                origin: Vec3::new(n0 as f64 * cell_size, e0 as f64 * cell_size, 0.0),
                counts: m,
            }
        }
        _ => OccupancyGrid {
            cell_size,
            origin: Vec3::ZERO,
            counts: Vec::new(),
        },
    };
    Ok(Superposition {
        grid,
        consistency,
        runs: runs.len(),
    })
}

/// [`superpose`] for parsed logs, refusing logs from different worlds.
pub fn superpose_logs(logs: &[TelemetryLog], cell_size: f64) -> Result<Superposition, SuperposeError> {
    let headers: Vec<&Header> = logs.iter().filter_map(|l| l.header.as_ref()).collect();
    if let Some(first) = headers.first() {
        if let Some(other) = headers.iter().find(|h| !first.same_frame(h)) {
            return Err(SuperposeError::FrameMismatch(
                format!("{}/{}", first.world, first.world_seed),
                format!("{}/{}", other.world, other.world_seed),
            ));
        }
    }
    let runs: Vec<&[TelemetryRecord]> = logs.iter().map(|l| l.records.as_slice()).collect();
    superpose(&runs, cell_size)
}
