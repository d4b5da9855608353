//! Fixed-step simulation of the highway and intersection scenarios.

mod crossing;
mod follow;
mod highway;
pub mod metrics;
pub mod spawn;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assignment::CostWeights;
use crate::collision::{Footprint, Obb};
use crate::error::{Error, Result};
use crate::intersection::ZoneConfig;
use crate::vehicle_dynamics::{ControllerGains, Range};

pub use crossing::IntersectionWorld;
pub use follow::{safe_gap, safety_clamp};
pub use highway::HighwayWorld;
pub use metrics::{MetricsAccumulator, RunSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Highway,
    Intersection,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::Highway => "highway",
            ScenarioKind::Intersection => "intersection",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    MultiVp,
    SingleVp,
    Fcfs,
    RandomLane,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::MultiVp, Policy::SingleVp, Policy::Fcfs, Policy::RandomLane];

    pub fn name(self) -> &'static str {
        match self {
            Policy::MultiVp => "multi-vp",
            Policy::SingleVp => "single-vp",
            Policy::Fcfs => "fcfs",
            Policy::RandomLane => "random-lane",
        }
    }

    pub fn supports(self, kind: ScenarioKind) -> bool {
        match kind {
            ScenarioKind::Highway => matches!(self, Policy::MultiVp | Policy::RandomLane),
            ScenarioKind::Intersection => matches!(self, Policy::MultiVp | Policy::SingleVp | Policy::Fcfs),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig { line: None, msg: format!("unknown policy `{s}`") })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HighwayConfig {
    /// Main-road lanes; the on/off ramp is one extra lane to the right.
    pub n_lanes: u32,
    pub lane_width: f64,
    pub segment_length: f64,
    /// Segments in the road, each with one on-ramp and one off-ramp.
    pub n_segments: u32,
    /// Join the end of the road to its start.
    pub ring: bool,
    /// Start of the on-ramp merge segment within each segment (m).
    pub onramp_offset: f64,
    pub onramp_length: f64,
    /// Start of the off-ramp diverge segment within each segment (m).
    pub offramp_offset: f64,
    pub offramp_length: f64,
    /// Vehicle generating rate per on-ramp (veh/s).
    pub vgr: f64,
    /// Desired speed per main lane, lane 1 first (m/s).
    pub lane_speeds: Vec<f64>,
    pub main_speed_range: Range,
    pub ramp_speed: f64,
    pub ramp_speed_range: Range,
    pub accel_range: Range,
    /// Formation slot gap (m).
    pub slot_gap: f64,
    /// Lane reserved for joining and leaving vehicles under the formation
    /// policy.
    pub transition_lane: u32,
    /// Farthest a merged vehicle may be from its would-be slot to join an
    /// existing formation (m).
    pub join_reach: f64,
    /// Distance before the off-ramp at which a vehicle starts leaving (m).
    pub exit_prepare: f64,
    /// Longitudinal span of a one-lane change (m).
    pub lane_change_span: f64,
    /// Time headway of the car-following law (s).
    pub headway: f64,
}

impl Default for HighwayConfig {
    fn default() -> Self {
        Self {
            n_lanes: 4,
            lane_width: 4.0,
            segment_length: 2000.0,
            n_segments: 1,
            ring: true,
            onramp_offset: 0.0,
            onramp_length: 100.0,
            offramp_offset: 1600.0,
            offramp_length: 50.0,
            vgr: 1.0 / 3.0,
            lane_speeds: vec![25.0, 25.0, 25.0, 20.0],
            main_speed_range: Range::new(15.0, 30.0),
            ramp_speed: 15.0,
            ramp_speed_range: Range::new(5.0, 25.0),
            accel_range: Range::new(-6.0, 3.0),
            slot_gap: 20.0,
            transition_lane: 4,
            join_reach: 150.0,
            exit_prepare: 600.0,
            lane_change_span: 60.0,
            headway: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntersectionConfig {
    pub zones: ZoneConfig,
    pub lane_width: f64,
    /// Approach lane of the left, straight and right turn.
    pub lane_for_turn: [u32; 3],
    /// Departure lane of the left, straight and right turn.
    pub exit_lane_for_turn: [u32; 3],
    /// Total arrivals over all legs (veh/h).
    pub throughput_vph: f64,
    /// Relative arrival weight of the N, E, S, W legs.
    pub leg_weights: [f64; 4],
    /// Relative weight of left, straight and right turns.
    pub turn_weights: [f64; 3],
    pub speed_range: Range,
    pub accel_range: Range,
    /// Slot gap outside the coordinating zone (m).
    pub gap_outside: f64,
    /// Slot gap inside the coordinating zone (m).
    pub gap_inside: f64,
    /// Merge range for subformations; defaults to twice the outside gap.
    pub merge_range: Option<f64>,
    /// Largest formation assembled at the entrance.
    pub max_formation: usize,
    /// How far a newcomer may spawn behind its would-be slot and still
    /// join the formation (m).
    pub join_slack: f64,
    /// Idle time kept between conflicting reservations (s).
    pub fcfs_buffer: f64,
    /// Distance past the exit line at which vehicles leave the world (m).
    pub exit_clearance: f64,
    /// Longitudinal span of a one-lane change (m).
    pub lane_change_span: f64,
    /// Time headway of the car-following law (s).
    pub headway: f64,
    /// Longitudinal slot error below which a regrouping step counts as done (m).
    pub division_tol: f64,
    /// Lateral error below which a lane change counts as done (m).
    pub lateral_tol: f64,
}

impl Default for IntersectionConfig {
    fn default() -> Self {
        Self {
            zones: ZoneConfig::default(),
            lane_width: 4.0,
            lane_for_turn: [1, 2, 3],
            exit_lane_for_turn: [1, 2, 3],
            throughput_vph: 2000.0,
            leg_weights: [1.0; 4],
            turn_weights: [1.0; 3],
            speed_range: Range::new(0.0, 20.0),
            accel_range: Range::new(-6.0, 3.0),
            gap_outside: 15.0,
            gap_inside: 9.0,
            merge_range: None,
            max_formation: 9,
            join_slack: 45.0,
            fcfs_buffer: 1.0,
            exit_clearance: 30.0,
            lane_change_span: 30.0,
            headway: 0.3,
            division_tol: 0.5,
            lateral_tol: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub dt: f64,
    pub duration: f64,
    pub rng_seed: u64,
    /// Heatmap sampling interval (s).
    pub snapshot_interval: f64,
    /// Heatmap bin width (m).
    pub bin_width: f64,
    pub wheelbase: f64,
    pub steer_range: Range,
    pub footprint: Footprint,
    pub gains: ControllerGains,
    pub weights: CostWeights,
    pub highway: HighwayConfig,
    pub intersection: IntersectionConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Intersection,
            dt: 0.04,
            duration: 300.0,
            rng_seed: 1,
            snapshot_interval: 10.0,
            bin_width: 500.0,
            wheelbase: 2.8,
            steer_range: Range::new(-30.0, 30.0),
            footprint: Footprint::default(),
            gains: ControllerGains::default(),
            weights: CostWeights::default(),
            highway: HighwayConfig::default(),
            intersection: IntersectionConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn highway() -> Self {
        Self { kind: ScenarioKind::Highway, duration: 120.0, ..Default::default() }
    }

    pub fn intersection() -> Self {
        Self::default()
    }

    /// Semantic checks beyond what the type system enforces. The returned
    /// dotted key names the offending field or section for error reporting.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        fn pos(key: &'static str, v: f64) -> std::result::Result<(), (&'static str, String)> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err((key, format!("`{key}` must be positive, got {v}")))
            }
        }
        fn range(key: &'static str, r: &Range) -> std::result::Result<(), (&'static str, String)> {
            if r.is_valid() {
                Ok(())
            } else {
                Err((key, format!("`{key}` needs min <= max")))
            }
        }
        pos("dt", self.dt)?;
        pos("duration", self.duration)?;
        if self.dt > self.duration {
            return Err(("dt", "`dt` exceeds `duration`".into()));
        }
        pos("snapshot_interval", self.snapshot_interval)?;
        pos("bin_width", self.bin_width)?;
        pos("wheelbase", self.wheelbase)?;
        range("steer_range", &self.steer_range)?;
        pos("footprint.length", self.footprint.length)?;
        pos("footprint.width", self.footprint.width)?;
        if !(self.gains.k_p >= 0.0 && self.gains.k_v > 0.0) {
            return Err(("gains", "gains need k_p >= 0 and k_v > 0".into()));
        }
        self.weights.validate().map_err(|e| ("weights", e.to_string()))?;

        let h = &self.highway;
        if h.n_lanes < 2 {
            return Err(("highway.n_lanes", "the highway needs at least two main lanes".into()));
        }
        pos("highway.lane_width", h.lane_width)?;
        pos("highway.segment_length", h.segment_length)?;
        if h.n_segments == 0 {
            return Err(("highway.n_segments", "`n_segments` must be at least 1".into()));
        }
        if h.lane_speeds.len() != h.n_lanes as usize {
            return Err(("highway.lane_speeds", format!("`lane_speeds` needs {} entries", h.n_lanes)));
        }
        if !(h.vgr.is_finite() && h.vgr >= 0.0) {
            return Err(("highway.vgr", "`vgr` must be non-negative".into()));
        }
        if h.vgr * self.dt > 1.0 {
            return Err(("highway.vgr", "`vgr` times `dt` must not exceed 1".into()));
        }
        let ramps_fit = h.onramp_offset >= 0.0
            && h.onramp_offset + h.onramp_length < h.offramp_offset
            && h.offramp_offset + h.offramp_length <= h.segment_length;
        if !ramps_fit {
            return Err(("highway.offramp_offset", "ramps must fit in the segment, on-ramp first".into()));
        }
        pos("highway.onramp_length", h.onramp_length)?;
        pos("highway.offramp_length", h.offramp_length)?;
        range("highway.main_speed_range", &h.main_speed_range)?;
        range("highway.ramp_speed_range", &h.ramp_speed_range)?;
        range("highway.accel_range", &h.accel_range)?;
        pos("highway.slot_gap", h.slot_gap)?;
        if h.transition_lane != h.n_lanes {
            return Err(("highway.transition_lane", "the transition lane must be the rightmost main lane".into()));
        }
        pos("highway.lane_change_span", h.lane_change_span)?;
        pos("highway.headway", h.headway)?;

        let i = &self.intersection;
        i.zones.validate().map_err(|e| ("intersection.zones", e.to_string()))?;
        pos("intersection.lane_width", i.lane_width)?;
        if !(i.throughput_vph.is_finite() && i.throughput_vph >= 0.0) {
            return Err(("intersection.throughput_vph", "`throughput_vph` must be non-negative".into()));
        }
        let weights_ok = |w: &[f64]| w.iter().all(|x| x.is_finite() && *x >= 0.0) && w.iter().sum::<f64>() > 0.0;
        if !weights_ok(&i.leg_weights) {
            return Err(("intersection.leg_weights", "leg weights must be non-negative with a positive sum".into()));
        }
        if !weights_ok(&i.turn_weights) {
            return Err(("intersection.turn_weights", "turn weights must be non-negative with a positive sum".into()));
        }
        range("intersection.speed_range", &i.speed_range)?;
        range("intersection.accel_range", &i.accel_range)?;
        pos("intersection.gap_outside", i.gap_outside)?;
        pos("intersection.gap_inside", i.gap_inside)?;
        if i.max_formation == 0 {
            return Err(("intersection.max_formation", "`max_formation` must be at least 1".into()));
        }
        if !(i.fcfs_buffer.is_finite() && i.fcfs_buffer >= 0.0) {
            return Err(("intersection.fcfs_buffer", "`fcfs_buffer` must be non-negative".into()));
        }
        pos("intersection.exit_clearance", i.exit_clearance)?;
        pos("intersection.lane_change_span", i.lane_change_span)?;
        pos("intersection.headway", i.headway)?;
        pos("intersection.division_tol", i.division_tol)?;
        pos("intersection.lateral_tol", i.lateral_tol)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(_, msg)| Error::InvalidConfig { line: None, msg })
    }
}

/// Per-tick bookkeeping shared by both worlds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Ledger {
    pub spawned: usize,
    pub exited: usize,
}

/// Anything the run driver can advance and measure.
pub trait World {
    fn time(&self) -> f64;
    fn step(&mut self) -> Result<()>;
    fn ledger(&self) -> Ledger;
    /// (speed, acceleration over the last tick) of every vehicle in the world.
    fn kinematics(&self) -> Vec<(usize, f64, f64)>;
    /// Road coordinate of every vehicle for the heatmap, in `[0, road_length)`.
    fn bin_coordinates(&self) -> Vec<f64>;
    fn road_length(&self) -> f64;
    fn footprints(&self) -> Vec<(usize, Obb)>;
    /// Collision pairs seen so far.
    fn collisions(&self) -> &[(usize, usize)];
    /// Arrivals drawn so far, placed or not.
    fn generated(&self) -> usize;
    /// Arrivals drawn but not yet placed because their entry was occupied.
    fn deferred(&self) -> usize;
}

/// Overlapping footprint pairs, smaller id first, sorted.
pub fn detect_collisions(boxes: &[(usize, Obb)], fp: &Footprint) -> Vec<(usize, usize)> {
    let reach = 2.0 * fp.bounding_radius();
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    idx.sort_by(|&a, &b| boxes[a].1.center.x.total_cmp(&boxes[b].1.center.x));
    let mut out = Vec::new();
    for (k, &a) in idx.iter().enumerate() {
        for &b in &idx[k + 1..] {
            if boxes[b].1.center.x - boxes[a].1.center.x > reach {
                break;
            }
            if boxes[a].1.center.dist(&boxes[b].1.center) < reach && boxes[a].1.overlaps(&boxes[b].1) {
                let (i, j) = (boxes[a].0, boxes[b].0);
                out.push((i.min(j), i.max(j)));
            }
        }
    }
    out.sort_unstable();
    out
}

/// Run a scenario to completion.
pub fn run_scenario(config: &ScenarioConfig, policy: Policy) -> Result<MetricsAccumulator> {
    config.validate()?;
    if !policy.supports(config.kind) {
        return Err(Error::UnsupportedPolicy { policy: policy.to_string(), scenario: config.kind.to_string() });
    }
    match config.kind {
        ScenarioKind::Highway => drive(&mut HighwayWorld::new(config, policy)?, config),
        ScenarioKind::Intersection => drive(&mut IntersectionWorld::new(config, policy)?, config),
    }
}

fn drive<W: World>(world: &mut W, config: &ScenarioConfig) -> Result<MetricsAccumulator> {
    let mut acc = MetricsAccumulator::new(config.snapshot_interval, config.bin_width);
    let ticks = (config.duration / config.dt).round() as usize;
    acc.record(world);
    for _ in 0..ticks {
        world.step()?;
        acc.record(world);
    }
    acc.finish(world);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle_dynamics::Point2;

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("nope".parse::<Policy>().is_err());
    }

    #[test]
    fn policy_support_matrix() {
        assert!(Policy::RandomLane.supports(ScenarioKind::Highway));
        assert!(!Policy::Fcfs.supports(ScenarioKind::Highway));
        assert!(!Policy::RandomLane.supports(ScenarioKind::Intersection));
        let err = run_scenario(&ScenarioConfig::highway(), Policy::Fcfs).unwrap_err();
        assert!(matches!(err, Error::UnsupportedPolicy { .. }));
    }

    #[test]
    fn defaults_validate() {
        ScenarioConfig::highway().validate().unwrap();
        ScenarioConfig::intersection().validate().unwrap();
        let bad = ScenarioConfig { dt: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn collision_pairs() {
        let fp = Footprint::default();
        let at = |id, x: f64| (id, Obb::new(Point2::new(x, 0.0), 0.0, &fp));
        assert!(detect_collisions(&[at(1, 0.0), at(2, 20.0)], &fp).is_empty());
        assert_eq!(detect_collisions(&[at(7, 3.0), at(2, 3.0)], &fp), vec![(2, 7)]);
    }
}
