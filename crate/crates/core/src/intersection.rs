//! Multi-lane unsignalised intersection: movement geometry, pairwise
//! conflicts, zones, and the layered passing order of vehicle groups.
//!
//! World frame: origin at the intersection centre, `+y` north, `+x` east,
//! right-hand traffic. Each leg carries three approach lanes and three
//! departure lanes; lane 1 is the one next to the median.
//!
//! Scheduling works on a scalar "virtual coordinate": a vehicle's remaining
//! distance to the centre measured along its own path. Smaller means closer,
//! and it goes negative once the vehicle has passed the centre.

use crate::error::{Error, Result};
use crate::collision::{Footprint, Obb};
use crate::vehicle_dynamics::Point2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Leg {
    North,
    East,
    South,
    West,
}

impl Leg {
    pub const ALL: [Leg; 4] = [Leg::North, Leg::East, Leg::South, Leg::West];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Unit vector from the centre out along this leg.
    pub fn outward(self) -> (f64, f64) {
        match self {
            Leg::North => (0.0, 1.0),
            Leg::East => (1.0, 0.0),
            Leg::South => (0.0, -1.0),
            Leg::West => (-1.0, 0.0),
        }
    }

    fn from_outward(d: (f64, f64)) -> Leg {
        Leg::ALL
            .into_iter()
            .find(|l| {
                let o = l.outward();
                (o.0 - d.0).abs() < 1e-9 && (o.1 - d.1).abs() < 1e-9
            })
            .expect("axis-aligned direction")
    }

    pub fn opposite(self) -> Leg {
        Leg::ALL[(self.index() + 2) % 4]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Turn {
    Left,
    Straight,
    Right,
}

impl Turn {
    pub const ALL: [Turn; 3] = [Turn::Left, Turn::Straight, Turn::Right];

    pub fn index(self) -> usize {
        self as usize
    }
}

fn right_of(d: (f64, f64)) -> (f64, f64) {
    (d.1, -d.0)
}

fn left_of(d: (f64, f64)) -> (f64, f64) {
    (-d.1, d.0)
}

/// Lane layout of the symmetric four-leg intersection.
#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionGeometry {
    pub lane_width: f64,
    pub approach_lanes: u32,
    /// Approach lane used by each turn (left, straight, right).
    pub lane_for_turn: [u32; 3],
    /// Departure lane reached by each turn (left, straight, right).
    pub exit_lane_for_turn: [u32; 3],
}

impl Default for IntersectionGeometry {
    fn default() -> Self {
        Self { lane_width: 4.0, approach_lanes: 3, lane_for_turn: [1, 2, 3], exit_lane_for_turn: [1, 2, 3] }
    }
}

impl IntersectionGeometry {
    /// Half side of the square conflict box: the stop line sits this far
    /// from the centre on every leg.
    pub fn box_half(&self) -> f64 {
        self.approach_lanes as f64 * self.lane_width
    }

    pub fn turn_for_lane(&self, lane: u32) -> Option<Turn> {
        Turn::ALL.into_iter().find(|t| self.lane_for_turn[t.index()] == lane)
    }

    /// World position of a point on an approach lane at distance `d` from
    /// the centre (measured along the leg axis).
    pub fn approach_point(&self, leg: Leg, lane: u32, d: f64) -> Point2 {
        let o = leg.outward();
        let travel = (-o.0, -o.1);
        let r = right_of(travel);
        let off = self.lane_width * (lane as f64 - 0.5);
        Point2::new(o.0 * d + r.0 * off, o.1 * d + r.1 * off)
    }

    /// World position of a point on a departure lane at distance `d`.
    pub fn departure_point(&self, leg: Leg, lane: u32, d: f64) -> Point2 {
        let o = leg.outward();
        let r = right_of(o);
        let off = self.lane_width * (lane as f64 - 0.5);
        Point2::new(o.0 * d + r.0 * off, o.1 * d + r.1 * off)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Movement {
    /// 1..=12: legs N, E, S, W in order, turns left, straight, right within a leg.
    pub id: usize,
    pub approach_leg: Leg,
    pub turn: Turn,
    pub approach_lane: u32,
    pub exit_leg: Leg,
    pub exit_lane: u32,
    /// Polyline through the box from the stop line to the exit line.
    pub path: Vec<Point2>,
    cum: Vec<f64>,
}

impl Movement {
    pub fn id_of(leg: Leg, turn: Turn) -> usize {
        leg.index() * 3 + turn.index() + 1
    }

    pub fn path_length(&self) -> f64 {
        *self.cum.last().unwrap_or(&0.0)
    }

    /// Position and heading (rad) at arc length `s` inside the box; before
    /// the stop line and past the exit line the pose continues along the
    /// approach and exit directions.
    pub fn pose_at(&self, s: f64) -> (Point2, f64) {
        let n = self.path.len();
        let seg_heading = |a: Point2, b: Point2| (b.y - a.y).atan2(b.x - a.x);
        if s <= 0.0 {
            let h = seg_heading(self.path[0], self.path[1]);
            let p = self.path[0];
            return (Point2::new(p.x + s * h.cos(), p.y + s * h.sin()), h);
        }
        let total = self.path_length();
        if s >= total {
            let h = seg_heading(self.path[n - 2], self.path[n - 1]);
            let p = self.path[n - 1];
            let e = s - total;
            return (Point2::new(p.x + e * h.cos(), p.y + e * h.sin()), h);
        }
        let i = self.cum.partition_point(|&c| c < s).clamp(1, n - 1);
        let (a, b) = (self.path[i - 1], self.path[i]);
        let f = (s - self.cum[i - 1]) / (self.cum[i] - self.cum[i - 1]);
        (Point2::new(a.x + f * (b.x - a.x), a.y + f * (b.y - a.y)), seg_heading(a, b))
    }
}

const TURN_SAMPLES: usize = 48;
// quarter-ellipse handle ratio for a cubic Bézier
const KAPPA: f64 = 0.552_284_749_8;

fn turn_path(entry: Point2, travel: (f64, f64), exit: Point2, out: (f64, f64)) -> Vec<Point2> {
    let dx = exit.x - entry.x;
    let dy = exit.y - entry.y;
    let along_in = (dx * travel.0 + dy * travel.1).abs();
    let along_out = (dx * out.0 + dy * out.1).abs();
    let c1 = Point2::new(entry.x + travel.0 * KAPPA * along_in, entry.y + travel.1 * KAPPA * along_in);
    let c2 = Point2::new(exit.x - out.0 * KAPPA * along_out, exit.y - out.1 * KAPPA * along_out);
    (0..=TURN_SAMPLES)
        .map(|k| {
            let t = k as f64 / TURN_SAMPLES as f64;
            let u = 1.0 - t;
            let (b0, b1, b2, b3) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
            Point2::new(
                b0 * entry.x + b1 * c1.x + b2 * c2.x + b3 * exit.x,
                b0 * entry.y + b1 * c1.y + b2 * c2.y + b3 * exit.y,
            )
        })
        .collect()
}

/// The twelve movements of the symmetric three-lane intersection.
pub fn build_movements(geometry: &IntersectionGeometry) -> Result<Vec<Movement>> {
    if geometry.approach_lanes != 3 {
        return Err(Error::UnsupportedGeometry(format!(
            "{} approach lanes per leg; only 3 are supported",
            geometry.approach_lanes
        )));
    }
    if !(geometry.lane_width.is_finite() && geometry.lane_width > 0.0) {
        return Err(Error::UnsupportedGeometry("lane width must be positive".into()));
    }
    let lanes_ok = |m: &[u32; 3]| m.iter().all(|&l| (1..=3).contains(&l));
    let mut sorted = geometry.lane_for_turn;
    sorted.sort_unstable();
    if sorted != [1, 2, 3] || !lanes_ok(&geometry.exit_lane_for_turn) {
        return Err(Error::UnsupportedGeometry(
            "each turn needs its own approach lane and a valid exit lane".into(),
        ));
    }

    let half = geometry.box_half();
    let mut out = Vec::with_capacity(12);
    for leg in Leg::ALL {
        let o = leg.outward();
        let travel = (-o.0, -o.1);
        for turn in Turn::ALL {
            let exit_dir = match turn {
                Turn::Straight => travel,
                Turn::Left => left_of(travel),
                Turn::Right => right_of(travel),
            };
            let exit_leg = Leg::from_outward(exit_dir);
            let approach_lane = geometry.lane_for_turn[turn.index()];
            let exit_lane = geometry.exit_lane_for_turn[turn.index()];
            let entry = geometry.approach_point(leg, approach_lane, half);
            let exit = geometry.departure_point(exit_leg, exit_lane, half);
            let path = match turn {
                Turn::Straight if (entry.x - exit.x).abs() < 1e-9 || (entry.y - exit.y).abs() < 1e-9 => {
                    vec![entry, exit]
                }
                _ => turn_path(entry, travel, exit, exit_dir),
            };
            let mut cum = Vec::with_capacity(path.len());
            let mut acc = 0.0;
            cum.push(0.0);
            for w in path.windows(2) {
                acc += w[0].dist(&w[1]);
                cum.push(acc);
            }
            out.push(Movement {
                id: Movement::id_of(leg, turn),
                approach_leg: leg,
                turn,
                approach_lane,
                exit_leg,
                exit_lane,
                path,
                cum,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConflictKind {
    None,
    Converging,
    Diverging,
    Crossing,
}

/// Symmetric, irreflexive conflict relation over movement ids 1..=12.
#[derive(Debug, Clone, PartialEq)]
pub struct ConflictRelation {
    kinds: Vec<Vec<ConflictKind>>,
}

impl ConflictRelation {
    pub fn from_kinds(kinds: Vec<Vec<ConflictKind>>) -> Self {
        Self { kinds }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn kind(&self, a: usize, b: usize) -> ConflictKind {
        self.kinds[a - 1][b - 1]
    }

    pub fn conflicts(&self, a: usize, b: usize) -> bool {
        self.kind(a, b) != ConflictKind::None
    }

    /// Two vehicle groups conflict when their movements do, or when they
    /// share a movement (and with it an approach lane).
    pub fn groups_conflict(&self, a: usize, b: usize) -> bool {
        a == b || self.conflicts(a, b)
    }
}

fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn segments_cross(p1: Point2, p2: Point2, q1: Point2, q2: Point2) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// Whether two polylines properly intersect.
pub fn paths_cross(a: &[Point2], b: &[Point2]) -> bool {
    a.windows(2).any(|s| b.windows(2).any(|t| segments_cross(s[0], s[1], t[0], t[1])))
}

fn opposite_lefts(a: &Movement, b: &Movement) -> bool {
    a.turn == Turn::Left && b.turn == Turn::Left && a.approach_leg.opposite() == b.approach_leg
}

pub fn compute_conflicts(movements: &[Movement]) -> ConflictRelation {
    let n = movements.len();
    let mut kinds = vec![vec![ConflictKind::None; n]; n];
    for (i, a) in movements.iter().enumerate() {
        for (j, b) in movements.iter().enumerate() {
            if i == j {
                continue;
            }
            kinds[i][j] = if a.approach_leg == b.approach_leg && a.approach_lane == b.approach_lane {
                ConflictKind::Diverging
            } else if a.exit_leg == b.exit_leg && a.exit_lane == b.exit_lane {
                ConflictKind::Converging
            } else if !opposite_lefts(a, b) && paths_cross(&a.path, &b.path) {
                ConflictKind::Crossing
            } else {
                ConflictKind::None
            };
        }
    }
    ConflictRelation { kinds }
}

/// Whether footprints on movements `a` and `b` ever overlap while `b`
/// trails `a` by `offset` metres of path (negative: `b` leads).
pub fn footprints_meet(a: &Movement, b: &Movement, offset: f64, fp: &Footprint) -> bool {
    const STEP: f64 = 0.1;
    let reach = fp.length;
    let start = -reach + offset.min(0.0);
    let end = a.path_length().max(b.path_length()) + reach + offset.max(0.0);
    let n = ((end - start) / STEP).ceil() as usize;
    (0..=n).any(|k| {
        let s = start + k as f64 * STEP;
        let (pa, ha) = a.pose_at(s);
        let (pb, hb) = b.pose_at(s - offset);
        pa.dist(&pb) < 2.0 * fp.bounding_radius() && Obb::new(pa, ha, fp).overlaps(&Obb::new(pb, hb, fp))
    })
}

/// Smallest trailing offset from which every larger offset (up to `limit`)
/// keeps the two footprints apart. `None` if even `limit` is unsafe.
pub fn min_safe_offset(a: &Movement, b: &Movement, fp: &Footprint, limit: f64) -> Option<f64> {
    const GRID: f64 = 0.25;
    let n = (limit / GRID).ceil() as usize;
    let mut safe_from = None;
    for k in (0..=n).rev() {
        let off = k as f64 * GRID;
        if footprints_meet(a, b, off, fp) {
            break;
        }
        safe_from = Some(off);
    }
    safe_from
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ZoneConfig {
    /// Coordinating radius (m).
    pub r1: f64,
    /// Adjusting radius (m).
    pub r2: f64,
    /// Approaching radius, where vehicles enter (m).
    pub r3: f64,
    /// Gap between consecutive formations in the virtual platoon (m).
    pub d_t: f64,
    /// Desired speed of the virtual leader (m/s).
    pub v0_des: f64,
}

impl Default for ZoneConfig {
    fn default() -> Self {
        Self { r1: 300.0, r2: 500.0, r3: 800.0, d_t: 25.0, v0_des: 10.0 }
    }
}

impl ZoneConfig {
    pub fn validate(&self) -> Result<()> {
        if 0.0 < self.r1 && self.r1 < self.r2 && self.r2 < self.r3 && self.d_t > 0.0 && self.v0_des > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidState(format!("zone radii must satisfy 0 < R1 < R2 < R3: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Zone {
    Approaching,
    Adjusting,
    Coordinating,
}

/// Zone of a vehicle at distance `dist` from the centre. Boundaries belong
/// to the inner zone.
pub fn zone_of(dist: f64, zones: &ZoneConfig) -> Zone {
    if dist > zones.r2 {
        Zone::Approaching
    } else if dist > zones.r1 {
        Zone::Adjusting
    } else {
        Zone::Coordinating
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleGroup {
    /// Creation ordinal, unique per run.
    pub group_id: usize,
    pub movement_id: usize,
    /// Members front to back.
    pub member_ids: Vec<usize>,
    /// Slot offset of each member behind the first (first is 0).
    pub member_offsets: Vec<f64>,
    /// Lead vehicle's virtual coordinate (m).
    pub lead_dist: f64,
}

impl VehicleGroup {
    pub fn extent(&self) -> f64 {
        self.member_offsets.iter().copied().fold(0.0, f64::max)
    }
}

/// Sort by lead distance; ties go to the lower movement id, then to the
/// older group. Position `k` in the result is ordinal `k + 1`; the virtual
/// leader is ordinal 0.
pub fn order_groups(mut groups: Vec<VehicleGroup>) -> Vec<VehicleGroup> {
    groups.sort_by(|a, b| {
        a.lead_dist
            .total_cmp(&b.lead_dist)
            .then(a.movement_id.cmp(&b.movement_id))
            .then(a.group_id.cmp(&b.group_id))
    });
    groups
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanningTree {
    /// `parent[k]` for ordinal `k + 1`; 0 is the virtual leader.
    pub parent: Vec<usize>,
    /// Tree layer of ordinal `k + 1` (≥ 1).
    pub tree_layer: Vec<u32>,
    /// `layer_sets[i]` holds the ordinals in tree layer `i + 1`.
    pub layer_sets: Vec<Vec<usize>>,
}

impl SpanningTree {
    pub fn depth(&self) -> usize {
        self.layer_sets.len()
    }
}

/// Layered passing order. Each group sits one layer below the deepest
/// earlier group it conflicts with, so every layer is conflict-free.
pub fn build_spanning_tree(ordered: &[VehicleGroup], conflicts: &ConflictRelation) -> SpanningTree {
    let n = ordered.len();
    let mut tree_layer = vec![0u32; n];
    let mut parent = vec![0usize; n];
    for v in 0..n {
        let mut best = (0u32, 0usize);
        for u in 0..v {
            if conflicts.groups_conflict(ordered[u].movement_id, ordered[v].movement_id) && tree_layer[u] >= best.0 {
                best = (tree_layer[u], u + 1);
            }
        }
        tree_layer[v] = best.0 + 1;
        parent[v] = best.1;
    }
    let depth = tree_layer.iter().copied().max().unwrap_or(0) as usize;
    let mut layer_sets = vec![Vec::new(); depth];
    for (k, &l) in tree_layer.iter().enumerate() {
        layer_sets[l as usize - 1].push(k + 1);
    }
    SpanningTree { parent, tree_layer, layer_sets }
}

/// Virtual leading vehicle of the platoon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualLeader {
    pub pos: f64,
}

impl VirtualLeader {
    /// One gap ahead of the first group's lead vehicle.
    pub fn anchored(first_lead_dist: f64, zones: &ZoneConfig) -> Self {
        Self { pos: first_lead_dist - zones.d_t }
    }

    pub fn advance(&mut self, zones: &ZoneConfig, dt: f64) {
        self.pos -= zones.v0_des * dt;
    }
}

/// Per-layer lead offset from the virtual leader: `m·D_t` plus the largest
/// formation extent of every earlier layer.
pub fn layer_offsets(tree: &SpanningTree, ordered: &[VehicleGroup], zones: &ZoneConfig) -> Vec<f64> {
    let mut offsets = Vec::with_capacity(tree.depth());
    let mut acc = 0.0;
    for (i, set) in tree.layer_sets.iter().enumerate() {
        offsets.push((i + 1) as f64 * zones.d_t + acc);
        acc += set.iter().map(|&k| ordered[k - 1].extent()).fold(0.0, f64::max);
    }
    offsets
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleReference {
    pub vehicle_id: usize,
    pub ordinal: usize,
    pub ref_dist: f64,
}

/// Reference virtual coordinates: group leads from their tree layer and the
/// leader position, members from their own lead's actual position plus
/// their slot offset.
pub fn reference_positions(
    tree: &SpanningTree,
    ordered: &[VehicleGroup],
    zones: &ZoneConfig,
    leader_pos: f64,
) -> Vec<VehicleReference> {
    let offsets = layer_offsets(tree, ordered, zones);
    let mut out = Vec::new();
    for (k, g) in ordered.iter().enumerate() {
        let layer = tree.tree_layer[k] as usize;
        for (idx, (&vid, &off)) in g.member_ids.iter().zip(&g.member_offsets).enumerate() {
            let ref_dist = if idx == 0 { leader_pos + offsets[layer - 1] } else { g.lead_dist + off };
            out.push(VehicleReference { vehicle_id: vid, ordinal: k + 1, ref_dist });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeEvent {
    /// Group with this id has cleared the box.
    Exited(usize),
    Entered(VehicleGroup),
}

/// Apply an event to the current passing order and rebuild the tree.
///
/// Existing groups keep their relative order. A newcomer is slotted by
/// distance, but never ahead of a group that has already reached the stop
/// line.
pub fn regroup_tree_on_change(
    current: &[VehicleGroup],
    event: Option<TreeEvent>,
    conflicts: &ConflictRelation,
    stop_line: f64,
) -> (Vec<VehicleGroup>, SpanningTree) {
    let mut order: Vec<VehicleGroup> = current.to_vec();
    match event {
        None => {}
        Some(TreeEvent::Exited(id)) => order.retain(|g| g.group_id != id),
        Some(TreeEvent::Entered(g)) => {
            let pos = order
                .iter()
                .rposition(|o| o.lead_dist <= stop_line || precedes(o, &g))
                .map_or(0, |p| p + 1);
            order.insert(pos, g);
        }
    }
    let tree = build_spanning_tree(&order, conflicts);
    (order, tree)
}

fn precedes(a: &VehicleGroup, b: &VehicleGroup) -> bool {
    a.lead_dist
        .total_cmp(&b.lead_dist)
        .then(a.movement_id.cmp(&b.movement_id))
        .then(a.group_id.cmp(&b.group_id))
        .is_lt()
}
