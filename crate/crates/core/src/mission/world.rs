//! Procedural obstacle fields, the geo-fence and intervention detection.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::RigidBodyState;
use crate::geom::Vec3;

/// Horizontal clearance added to every obstacle radius for collisions, m.
pub const COLLISION_MARGIN: f64 = 0.3;
/// Distance past a fence or perimeter before it counts as an intervention, m.
pub const BREACH_THRESHOLD: f64 = 1.0;
/// Geo-fence keeps setpoints this far below the canopy ceiling, m.
pub const CEILING_MARGIN: f64 = 1.0;
/// Maximum reported range-sensor distance, m.
pub const MAX_RAY_RANGE: f64 = 50.0;
/// Obstacle-free radius kept around the standard start positions, m.
pub const START_CLEARING: f64 = 5.0;

const FOREST_DENSITY: f64 = 0.05;
const FOREST_MIN_SPACING: f64 = 2.0;
const FOREST_CEILING: f64 = -15.0;
const OPEN_CEILING: f64 = -120.0;
const SNOWY_DENSITY: f64 = 0.002;
const SNOWY_SLOPE: f64 = 0.1;
const DEFAULT_HALF_EXTENT: f64 = 500.0;
const HASH_CELL: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorldError {
    #[error("unknown world {0:?} (expected forest, snowy_mountain, plain_field or custom)")]
    UnknownWorld(String),
    #[error("invalid world: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub north: f64,
    pub east: f64,
    pub radius: f64,
    /// Height above ground, m.
    pub height: f64,
}

/// Axis-aligned N/E rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min_north: f64,
    pub max_north: f64,
    pub min_east: f64,
    pub max_east: f64,
}

impl Bounds {
    pub fn square(half_extent: f64) -> Self {
        Self {
            min_north: -half_extent,
            max_north: half_extent,
            min_east: -half_extent,
            max_east: half_extent,
        }
    }

    pub fn area(&self) -> f64 {
        (self.max_north - self.min_north) * (self.max_east - self.min_east)
    }

    pub fn contains(&self, north: f64, east: f64) -> bool {
        (self.min_north..=self.max_north).contains(&north)
            && (self.min_east..=self.max_east).contains(&east)
    }

    /// How far `(north, east)` lies outside the rectangle (0 inside).
    pub fn excess(&self, north: f64, east: f64) -> f64 {
        let dn = (self.min_north - north).max(north - self.max_north).max(0.0);
        let de = (self.min_east - east).max(east - self.max_east).max(0.0);
        dn.max(de)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    Forest,
    SnowyMountain,
    PlainField,
    Custom,
}

impl WorldKind {
    pub fn parse(name: &str) -> Result<Self, WorldError> {
        match name {
            "forest" => Ok(Self::Forest),
            "snowy_mountain" => Ok(Self::SnowyMountain),
            "plain_field" => Ok(Self::PlainField),
            "custom" => Ok(Self::Custom),
            other => Err(WorldError::UnknownWorld(other.to_owned())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Forest => "forest",
            Self::SnowyMountain => "snowy_mountain",
            Self::PlainField => "plain_field",
            Self::Custom => "custom",
        }
    }
}

/// How a world is described in a mission config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bounds: Option<Bounds>,
    /// Only read for `custom` worlds.
    #[serde(default)]
    pub obstacles: Vec<Cylinder>,
    #[serde(default)]
    pub canopy_ceiling: Option<f64>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            name: "plain_field".into(),
            seed: 0,
            bounds: None,
            obstacles: Vec::new(),
            canopy_ceiling: None,
        }
    }
}

impl WorldSpec {
    pub fn build(&self) -> Result<World, WorldError> {
        let kind = WorldKind::parse(&self.name)?;
        let bounds = self.bounds.unwrap_or(Bounds::square(DEFAULT_HALF_EXTENT));
        let mut world = match kind {
            WorldKind::Custom => World::new(
                kind,
                self.obstacles.clone(),
                self.canopy_ceiling.unwrap_or(OPEN_CEILING),
                bounds,
                self.seed,
            )?,
            _ => generate_world_in(kind, self.seed, bounds)?,
        };
        if let Some(c) = self.canopy_ceiling {
            world.canopy_ceiling = c;
        }
        Ok(world)
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub kind: WorldKind,
    pub obstacles: Vec<Cylinder>,
    /// Flight must stay below the canopy: D > canopy_ceiling.
    pub canopy_ceiling: f64,
    pub bounds: Bounds,
    pub seed: u64,
    /// Ground rises northwards at this rate (m of altitude per m of N, N > 0).
    pub ground_slope: f64,
    index: HashMap<(i64, i64), Vec<usize>>,
    max_radius: f64,
}

fn cell_of(north: f64, east: f64) -> (i64, i64) {
    ((north / HASH_CELL).floor() as i64, (east / HASH_CELL).floor() as i64)
}

impl World {
    pub fn new(
        kind: WorldKind,
        obstacles: Vec<Cylinder>,
        canopy_ceiling: f64,
        bounds: Bounds,
        seed: u64,
    ) -> Result<Self, WorldError> {
        if !(bounds.max_north > bounds.min_north && bounds.max_east > bounds.min_east) {
            return Err(WorldError::Invalid("degenerate bounds".into()));
        }
        if obstacles.iter().any(|c| !(c.radius > 0.0) || !(c.height >= 0.0)) {
            return Err(WorldError::Invalid("obstacle radii must be positive".into()));
        }
        let mut index: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, c) in obstacles.iter().enumerate() {
            index.entry(cell_of(c.north, c.east)).or_default().push(i);
        }
        let max_radius = obstacles.iter().map(|c| c.radius).fold(0.0, f64::max);
        Ok(Self {
            kind,
            obstacles,
            canopy_ceiling,
            bounds,
            seed,
            ground_slope: 0.0,
            index,
            max_radius,
        })
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Ground surface depth (D) below `(north, east)`.
    pub fn ground_d(&self, north: f64, _east: f64) -> f64 {
        -self.ground_slope * north.max(0.0)
    }

    /// Obstacles whose axis lies within `reach` of `(north, east)`, in
    /// insertion order.
    pub fn obstacles_near(&self, north: f64, east: f64, reach: f64) -> Vec<&Cylinder> {
        let r = reach + self.max_radius;
        let (n0, e0) = cell_of(north - r, east - r);
        let (n1, e1) = cell_of(north + r, east + r);
        let mut ids = Vec::new();
        for cn in n0..=n1 {
            for ce in e0..=e1 {
                if let Some(v) = self.index.get(&(cn, ce)) {
                    ids.extend_from_slice(v);
                }
            }
        }
        ids.sort_unstable();
        ids.into_iter()
            .map(|i| &self.obstacles[i])
            .filter(|c| (c.north - north).hypot(c.east - east) <= reach + c.radius)
            .collect()
    }

    /// Distance along a horizontal ray from `origin` at `heading` (radians
    /// from north towards east) to the first obstacle or perimeter, capped at
    /// [`MAX_RAY_RANGE`].
    pub fn cast_ray(&self, origin: Vec3, heading: f64) -> f64 {
        self.cast_rays(origin, &[heading])[0]
    }

    /// [`World::cast_ray`] for several headings sharing one neighbourhood
    /// query.
    pub fn cast_rays(&self, origin: Vec3, headings: &[f64]) -> Vec<f64> {
        let altitude = self.altitude_above_ground(origin);
        let near: Vec<&Cylinder> = self
            .obstacles_near(origin.x, origin.y, MAX_RAY_RANGE)
            .into_iter()
            .filter(|c| altitude <= c.height)
            .collect();
        let b = &self.bounds;
        headings
            .iter()
            .map(|&heading| {
                let (dir_e, dir_n) = heading.sin_cos();
                let mut best = MAX_RAY_RANGE;
                // Perimeter walls.
                for (dir, pos, lo, hi) in [
                    (dir_n, origin.x, b.min_north, b.max_north),
                    (dir_e, origin.y, b.min_east, b.max_east),
                ] {
                    if dir > 1e-12 {
                        best = best.min(((hi - pos) / dir).max(0.0));
                    } else if dir < -1e-12 {
                        best = best.min(((lo - pos) / dir).max(0.0));
                    }
                }
                for c in &near {
                    let (fn_, fe) = (origin.x - c.north, origin.y - c.east);
                    // |f + t d|^2 = r^2 with |d| = 1
                    let bq = fn_ * dir_n + fe * dir_e;
                    let cq = fn_ * fn_ + fe * fe - c.radius * c.radius;
                    if cq <= 0.0 {
                        return 0.0;
                    }
                    let disc = bq * bq - cq;
                    if disc < 0.0 {
                        continue;
                    }
                    let t = -bq - disc.sqrt();
                    if t >= 0.0 {
                        best = best.min(t);
                    }
                }
                best
            })
            .collect()
    }

    pub fn altitude_above_ground(&self, p: Vec3) -> f64 {
        self.ground_d(p.x, p.y) - p.z
    }
}

fn dart_throw(
    rng: &mut ChaCha8Rng,
    bounds: Bounds,
    target: usize,
    min_spacing: f64,
    mut make: impl FnMut(&mut ChaCha8Rng, f64, f64) -> Cylinder,
) -> Vec<Cylinder> {
    let cell = min_spacing / std::f64::consts::SQRT_2;
    let rows = ((bounds.max_north - bounds.min_north) / cell).ceil() as usize + 1;
    let cols = ((bounds.max_east - bounds.min_east) / cell).ceil() as usize + 1;
    let key = |n: f64, e: f64| {
        (
            ((n - bounds.min_north) / cell) as usize,
            ((e - bounds.min_east) / cell) as usize,
        )
    };
    // At most one accepted point per cell; usize::MAX marks an empty cell.
    let mut grid = vec![usize::MAX; rows * cols];
    let mut out: Vec<Cylinder> = Vec::with_capacity(target);
    let clearings = [(0.0, 0.0), (70.0, -450.0)];
    let max_attempts = target.saturating_mul(30).max(100);
    let mut attempts = 0;
    while out.len() < target && attempts < max_attempts {
        attempts += 1;
        let n = rng.random_range(bounds.min_north..bounds.max_north);
        let e = rng.random_range(bounds.min_east..bounds.max_east);
        if clearings
            .iter()
            .any(|(cn, ce)| (n - cn).hypot(e - ce) < START_CLEARING)
        {
            continue;
        }
        let (kn, ke) = key(n, e);
        let mut ok = true;
        'scan: for rn in kn.saturating_sub(2)..(kn + 3).min(rows) {
            for re in ke.saturating_sub(2)..(ke + 3).min(cols) {
                let j = grid[rn * cols + re];
                if j != usize::MAX {
                    let o = &out[j];
                    if (o.north - n).hypot(o.east - e) < min_spacing {
                        ok = false;
                        break 'scan;
                    }
                }
            }
        }
        if ok {
            grid[kn * cols + ke] = out.len();
            let c = make(rng, n, e);
            out.push(c);
        }
    }
    out
}

/// Builds one of the named worlds over the default 1 km square.
pub fn generate_world(name: &str, seed: u64) -> Result<World, WorldError> {
    generate_world_in(WorldKind::parse(name)?, seed, Bounds::square(DEFAULT_HALF_EXTENT))
}

/// Builds a named world over `bounds`.
///
/// * forest: dart-thrown trunks (0.05 per m^2, 2 m minimum spacing, radius
///   0.3 to 0.8 m, 20 to 30 m tall) under a canopy at D = -15 m;
/// * snowy_mountain: sparse boulders and ground rising northwards;
/// * plain_field: flat and empty.
pub fn generate_world_in(kind: WorldKind, seed: u64, bounds: Bounds) -> Result<World, WorldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area = bounds.area();
    match kind {
        WorldKind::Forest => {
            let target = (area * FOREST_DENSITY).round() as usize;
            let obstacles = dart_throw(&mut rng, bounds, target, FOREST_MIN_SPACING, |r, n, e| Cylinder {
                north: n,
                east: e,
                radius: r.random_range(0.3..=0.8),
                height: r.random_range(20.0..=30.0),
            });
            World::new(kind, obstacles, FOREST_CEILING, bounds, seed)
        }
        WorldKind::SnowyMountain => {
            let target = (area * SNOWY_DENSITY).round() as usize;
            let obstacles = dart_throw(&mut rng, bounds, target, 8.0, |r, n, e| Cylinder {
                north: n,
                east: e,
                radius: r.random_range(1.0..=3.0),
                height: r.random_range(2.0..=6.0),
            });
            let mut w = World::new(kind, obstacles, OPEN_CEILING, bounds, seed)?;
            w.ground_slope = SNOWY_SLOPE;
            Ok(w)
        }
        WorldKind::PlainField => World::new(kind, Vec::new(), OPEN_CEILING, bounds, seed),
        WorldKind::Custom => Err(WorldError::Invalid(
            "custom worlds are described explicitly, not generated".into(),
        )),
    }
}

/// Clamps a position setpoint into the fence: below the canopy (with
/// [`CEILING_MARGIN`]) and inside the perimeter. Returns the clamped setpoint
/// and whether any clamping happened.
pub fn geo_fence(setpoint: Vec3, world: &World) -> (Vec3, bool) {
    let b = &world.bounds;
    let mut out = setpoint;
    let ceiling = world.canopy_ceiling + CEILING_MARGIN;
    if out.z < ceiling {
        out.z = ceiling;
    }
    out.x = out.x.clamp(b.min_north, b.max_north);
    out.y = out.y.clamp(b.min_east, b.max_east);
    (out, out != setpoint)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    #[default]
    None,
    Collision,
    FenceBreach,
    BoundsExit,
}

impl InterventionKind {
    pub fn is_some(self) -> bool {
        self != Self::None
    }
}

/// Classifies the actual vehicle position against the world.
pub fn detect_intervention(state: &RigidBodyState, world: &World, fence_enabled: bool) -> InterventionKind {
    let p = state.position;
    let altitude = world.altitude_above_ground(p);
    for c in world.obstacles_near(p.x, p.y, COLLISION_MARGIN) {
        let d = (p.x - c.north).hypot(p.y - c.east);
        if d < c.radius + COLLISION_MARGIN && altitude <= c.height {
            return InterventionKind::Collision;
        }
    }
    if fence_enabled && p.z < world.canopy_ceiling - BREACH_THRESHOLD {
        return InterventionKind::FenceBreach;
    }
    if world.bounds.excess(p.x, p.y) > BREACH_THRESHOLD {
        return InterventionKind::BoundsExit;
    }
    InterventionKind::None
}
