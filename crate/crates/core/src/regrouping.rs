//! Regrouping of an approaching formation into per-movement subformations:
//! divide into longitudinal bands, change lanes, tighten, merge.
//!
//! Positions here are road-frame longitudinal coordinates (growing in the
//! travel direction). A subformation's slots hang behind a band anchor,
//! which itself sits `band_offset` behind the formation anchor.

use crate::assignment::{build_cost_matrix, solve_assignment, CostWeights, VehiclePos};
use crate::error::Result;
use crate::formation_geometry::{generate_targets, FormationSpec, TargetSlot};
use crate::intersection::Zone;
use crate::vehicle_dynamics::{bezier_lane_change, LaneChangeTrajectory, VehicleParams, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FormationPhase {
    Approaching,
    Dividing,
    LaneChanging,
    Adjusting,
    MergeCheck,
    Coordinating,
}

/// Completion flags that gate the phase transitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseInputs {
    pub lead_zone: Zone,
    pub division_done: bool,
    pub lane_change_done: bool,
    pub tightened: bool,
}

impl FormationPhase {
    /// Phase for a formation that first appears with its lead in `zone`.
    pub fn initial(zone: Zone) -> Self {
        match zone {
            Zone::Approaching => FormationPhase::Approaching,
            Zone::Adjusting => FormationPhase::Dividing,
            Zone::Coordinating => FormationPhase::Coordinating,
        }
    }

    /// At most one step forward per call; never backwards.
    pub fn next(self, inp: &PhaseInputs) -> Self {
        use FormationPhase::*;
        match self {
            Approaching if inp.lead_zone != Zone::Approaching => Dividing,
            Dividing if inp.division_done => LaneChanging,
            LaneChanging if inp.lane_change_done => Adjusting,
            Adjusting if inp.tightened => MergeCheck,
            MergeCheck if inp.lead_zone == Zone::Coordinating => Coordinating,
            p => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegroupConfig {
    /// Slot gap while approaching and during lane changes (m).
    pub gap_outside: f64,
    /// Slot gap of tightened subformations (m).
    pub gap_inside: f64,
    /// Largest gap across which two subformations merge; `None` means twice
    /// the outside gap.
    pub merge_range: Option<f64>,
    /// Division is complete once every vehicle is this close to its slot (m).
    pub division_tol: f64,
    /// Lane changes are complete once every vehicle is this close to its
    /// lane centre (m).
    pub lateral_tol: f64,
}

impl Default for RegroupConfig {
    fn default() -> Self {
        Self { gap_outside: 15.0, gap_inside: 9.0, merge_range: None, division_tol: 0.5, lateral_tol: 0.2 }
    }
}

impl RegroupConfig {
    pub fn merge_range(&self) -> f64 {
        self.merge_range.unwrap_or(2.0 * self.gap_outside)
    }
}

/// A formation member as seen by the planner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Member {
    pub vehicle_id: usize,
    pub movement_id: usize,
    pub pos_long: f64,
    pub lane: u32,
    /// Current slot offset behind the formation anchor (m).
    pub slot_offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subformation {
    pub movement_id: usize,
    /// Front to back.
    pub member_ids: Vec<usize>,
    /// Lane of each member's slot.
    pub lanes: Vec<u32>,
    /// Offset of each member behind the band anchor (m).
    pub offsets: Vec<f64>,
    /// Distance of the band anchor behind the formation anchor (m).
    pub band_offset: f64,
    pub slot_gap: f64,
}

impl Subformation {
    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }

    pub fn extent(&self) -> f64 {
        self.offsets.iter().copied().fold(0.0, f64::max)
    }

    /// Reference position of member `k` for a formation anchor at `anchor`.
    pub fn slot_pos(&self, k: usize, anchor: f64) -> f64 {
        anchor - self.band_offset - self.offsets[k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubformationPlan {
    pub subformations: Vec<Subformation>,
}

impl SubformationPlan {
    /// Band anchor offsets, front band first.
    pub fn division_offsets(&self) -> Vec<f64> {
        self.subformations.iter().map(|s| s.band_offset).collect()
    }
}

fn front_to_back(a: &Member, b: &Member) -> std::cmp::Ordering {
    b.pos_long
        .total_cmp(&a.pos_long)
        .then(a.slot_offset.total_cmp(&b.slot_offset))
        .then(a.lane.cmp(&b.lane))
        .then(a.vehicle_id.cmp(&b.vehicle_id))
}

/// Division: one band per movement, bands ordered by the mean position of
/// their members, front band first. Members keep their lanes and their
/// relative slot offsets; bands are spaced one slot gap apart.
pub fn split_by_movement(members: &[Member], spec: &FormationSpec) -> SubformationPlan {
    let mut sorted: Vec<Member> = members.to_vec();
    sorted.sort_by(front_to_back);

    let mut groups: Vec<(usize, Vec<Member>)> = Vec::new();
    for m in sorted {
        match groups.iter_mut().find(|(mv, _)| *mv == m.movement_id) {
            Some((_, g)) => g.push(m),
            None => groups.push((m.movement_id, vec![m])),
        }
    }
    let mean = |g: &[Member]| g.iter().map(|m| m.pos_long).sum::<f64>() / g.len() as f64;
    groups.sort_by(|(ma, a), (mb, b)| mean(b).total_cmp(&mean(a)).then(ma.cmp(mb)));

    let mut subformations = Vec::with_capacity(groups.len());
    let mut band_offset = 0.0;
    for (movement_id, g) in groups {
        let base = g.iter().map(|m| m.slot_offset).fold(f64::INFINITY, f64::min);
        let sub = Subformation {
            movement_id,
            member_ids: g.iter().map(|m| m.vehicle_id).collect(),
            lanes: g.iter().map(|m| m.lane).collect(),
            offsets: g.iter().map(|m| m.slot_offset - base).collect(),
            band_offset,
            slot_gap: spec.slot_gap,
        };
        band_offset += sub.extent() + spec.slot_gap;
        subformations.push(sub);
    }
    SubformationPlan { subformations }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneChangeOrder {
    pub vehicle_id: usize,
    pub target_lane: u32,
    /// New offset behind the band anchor (m).
    pub offset: f64,
    /// First one-lane hop; `None` if already on the target lane.
    pub first_hop: Option<LaneChangeTrajectory>,
}

/// Lane-change context needed to build trajectories.
#[derive(Debug, Clone, Copy)]
pub struct ManeuverContext<'a> {
    pub params: &'a VehicleParams,
    pub lane_width: f64,
    pub long_span: f64,
    pub max_span: f64,
    pub weights: &'a CostWeights,
}

/// Re-slot a divided subformation onto its permitted lanes.
///
/// New slots come from the interlaced generator over the permitted lanes;
/// vehicles are paired with slots by minimum assignment cost against their
/// current band references. `states` must follow `sub.member_ids`.
pub fn plan_lane_changes(
    sub: &Subformation,
    permitted_lanes: &[u32],
    states: &[VehicleState],
    ctx: &ManeuverContext,
) -> Result<(Subformation, Vec<LaneChangeOrder>)> {
    assert_eq!(states.len(), sub.len(), "one state per member");
    let n = sub.len();
    let spec = FormationSpec::new(permitted_lanes.len() as u32, sub.slot_gap);
    let slots: Vec<TargetSlot> = generate_targets(n, &spec);

    // Current references relative to the band anchor, with a small rank term
    // so that ties never swap the front-to-back order.
    let refs: Vec<VehiclePos> = (0..n)
        .map(|k| VehiclePos { pos_long: -sub.offsets[k], lane: lane_rank(permitted_lanes, sub.lanes[k]) })
        .collect();
    let mut costs = build_cost_matrix(&refs, &slots, 0.0, ctx.weights)?;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| costs.get(i, j) + 1e-6 * (i as f64 - j as f64).abs()).collect())
        .collect();
    costs = crate::assignment::CostMatrix::from_rows(&rows)?;
    let asg = solve_assignment(&costs);

    let mut orders = Vec::with_capacity(n);
    let mut new_sub = sub.clone();
    for k in 0..n {
        let slot = slots[asg.slot_of[k]];
        let target_lane = permitted_lanes[slot.lane_id as usize - 1];
        new_sub.lanes[k] = target_lane;
        new_sub.offsets[k] = slot.x_offset;
        let first_hop = if states[k].lane_id == target_lane {
            None
        } else {
            let hop = next_lane_toward(states[k].lane_id, target_lane);
            let start = crate::vehicle_dynamics::Point2::new(states[k].pos_long, states[k].pos_lat);
            Some(bezier_lane_change(start, hop, ctx.lane_width, ctx.long_span, states[k].speed, ctx.params, ctx.max_span)?)
        };
        orders.push(LaneChangeOrder { vehicle_id: sub.member_ids[k], target_lane, offset: slot.x_offset, first_hop });
    }
    Ok((new_sub, orders))
}

/// Permitted-lane index (1-based) closest to `lane`.
fn lane_rank(permitted: &[u32], lane: u32) -> u32 {
    permitted
        .iter()
        .enumerate()
        .min_by_key(|(_, &p)| p.abs_diff(lane))
        .map_or(1, |(i, _)| i as u32 + 1)
}

/// One lane hop from `from` toward `to`.
pub fn next_lane_toward(from: u32, to: u32) -> u32 {
    match from.cmp(&to) {
        std::cmp::Ordering::Less => from + 1,
        std::cmp::Ordering::Greater => from - 1,
        std::cmp::Ordering::Equal => from,
    }
}

/// Rescale slot offsets to a new gap, keeping the slot pattern.
pub fn tighten(sub: &Subformation, gap_inside: f64) -> Subformation {
    let scale = gap_inside / sub.slot_gap;
    let mut out = sub.clone();
    for o in &mut out.offsets {
        *o *= scale;
    }
    out.slot_gap = gap_inside;
    out
}

/// Merge `b` into `a` (which is ahead) when both serve the same movement,
/// the gap between them is within `merge_range`, and none of the
/// `foreign_positions` lies between them. Positions are absolute, given the
/// anchors of the two bands.
pub fn try_merge(
    a: &Subformation,
    a_anchor: f64,
    b: &Subformation,
    b_anchor: f64,
    merge_range: f64,
    foreign_positions: &[f64],
) -> Option<(Subformation, f64)> {
    if a.movement_id != b.movement_id || a.is_empty() || b.is_empty() {
        return None;
    }
    let a_tail = a_anchor - a.extent();
    let gap = a_tail - b_anchor;
    if gap > merge_range || b_anchor > a_anchor {
        return None;
    }
    if foreign_positions.iter().any(|&p| p < a_tail && p > b_anchor - b.extent()) {
        return None;
    }
    let mut lanes: Vec<u32> = a.lanes.iter().chain(&b.lanes).copied().collect();
    let mut permitted = lanes.clone();
    permitted.sort_unstable();
    permitted.dedup();
    let n = a.len() + b.len();
    let slots = generate_targets(n, &FormationSpec::new(permitted.len() as u32, a.slot_gap));
    for (k, s) in slots.iter().enumerate() {
        lanes[k] = permitted[s.lane_id as usize - 1];
    }
    let merged = Subformation {
        movement_id: a.movement_id,
        member_ids: a.member_ids.iter().chain(&b.member_ids).copied().collect(),
        lanes,
        offsets: slots.iter().map(|s| s.x_offset).collect(),
        band_offset: a.band_offset,
        slot_gap: a.slot_gap,
    };
    Some((merged, a_anchor))
}
