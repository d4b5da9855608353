//! Four-leg intersection world.
//!
//! Each vehicle carries one longitudinal coordinate `x` along its approach
//! leg (negative distance to the centre, so `x = -d`). Past the stop line it
//! moves one-dimensionally along its movement path with `s = x + box_half`.

use std::collections::{BTreeMap, BTreeSet};

use crate::assignment::{build_cost_matrix, solve_assignment, VehiclePos};
use crate::baselines::{box_transit_time, Reservation, ReservationBook, ReservationRequest};
use crate::collision::Obb;
use crate::error::Result;
use crate::formation_geometry::{generate_targets, FormationSpec};
use crate::intersection::{
    build_movements, build_spanning_tree, compute_conflicts, reference_positions, regroup_tree_on_change,
    zone_of, ConflictRelation, IntersectionGeometry, Leg, Movement, SpanningTree, TreeEvent, Turn, VehicleGroup,
    VirtualLeader, Zone, ZoneConfig,
};
use crate::regrouping::{
    plan_lane_changes, split_by_movement, tighten, try_merge, FormationPhase, ManeuverContext, Member, PhaseInputs,
    Subformation,
};
use crate::vehicle_dynamics::{
    bezier_lane_change, lane_center, lane_of, longitudinal_accel, preview_steering, step_kinematics, ControlInput,
    LaneChangeTrajectory, Point2, VehicleParams, VehicleState,
};

use super::follow::{follow_accel, occupied_lanes, safe_gap, safety_clamp};
use super::spawn::Spawner;
use super::{detect_collisions, Ledger, Policy, ScenarioConfig, World};

const N_KEYS: usize = 24;
const LANE_CHANGE_MARGIN: f64 = 2.0;
const STOP_LINE_SETBACK: f64 = 1.0;
const ALIGN_TOL: f64 = 0.3;

#[derive(Debug, Clone)]
struct Car {
    id: usize,
    leg: Leg,
    movement: usize,
    state: VehicleState,
    accel_meas: f64,
    /// Lane the car should end up on before the box (approach only).
    target_lane: u32,
    maneuver: Option<(LaneChangeTrajectory, u32)>,
    /// Offset behind the formation anchor while in a formation (m).
    slot_offset: f64,
    formation: Option<usize>,
    /// Formation sequence number on its leg; smaller is further ahead.
    seq: usize,
    group: Option<usize>,
    reservation: Option<Reservation>,
    cleared: bool,
}

#[derive(Debug, Clone)]
struct Formation {
    id: usize,
    leg: Leg,
    seq: usize,
    anchor: f64,
    anchor_speed: f64,
    members: Vec<usize>,
    phase: FormationPhase,
    subs: Vec<Subformation>,
    open: bool,
}

pub struct IntersectionWorld {
    cfg: ScenarioConfig,
    policy: Policy,
    geom: IntersectionGeometry,
    movements: Vec<Movement>,
    conflicts: ConflictRelation,
    transit: Vec<f64>,
    params: VehicleParams,
    zones: ZoneConfig,
    box_half: f64,
    spawner: Spawner,
    tick: u64,
    t: f64,
    cars: BTreeMap<usize, Car>,
    formations: Vec<Formation>,
    next_vehicle: usize,
    next_formation: usize,
    leg_seq: [usize; 4],
    order: Vec<VehicleGroup>,
    tree: SpanningTree,
    leader: Option<VirtualLeader>,
    book: ReservationBook,
    ledger: Ledger,
    collision_set: BTreeSet<(usize, usize)>,
    collisions: Vec<(usize, usize)>,
}

fn approach_key(leg: Leg, lane: u32) -> usize {
    leg.index() * 3 + (lane.clamp(1, 3) as usize - 1)
}

fn exit_key(leg: Leg, lane: u32) -> usize {
    12 + leg.index() * 3 + (lane.clamp(1, 3) as usize - 1)
}

/// Per-key sorted (coordinate, id, speed) lists.
type LaneIndex = Vec<Vec<(f64, usize, f64)>>;

impl IntersectionWorld {
    pub fn new(cfg: &ScenarioConfig, policy: Policy) -> Result<Self> {
        let ic = &cfg.intersection;
        let geom = IntersectionGeometry {
            lane_width: ic.lane_width,
            approach_lanes: 3,
            lane_for_turn: ic.lane_for_turn,
            exit_lane_for_turn: ic.exit_lane_for_turn,
        };
        let movements = build_movements(&geom)?;
        let conflicts = compute_conflicts(&movements);
        let transit = movements.iter().map(|m| box_transit_time(m, &cfg.footprint, ic.zones.v0_des)).collect();
        let params = VehicleParams {
            wheelbase: cfg.wheelbase,
            steer_range: cfg.steer_range,
            speed_range: ic.speed_range,
            accel_range: ic.accel_range,
        };
        params.validate()?;
        let wsum: f64 = ic.leg_weights.iter().sum();
        let rates: Vec<f64> = ic.leg_weights.iter().map(|w| ic.throughput_vph / 3600.0 * w / wsum).collect();
        let spawner = Spawner::new(cfg.rng_seed, &rates, &ic.turn_weights, cfg.dt);
        let box_half = geom.box_half();
        Ok(Self {
            cfg: cfg.clone(),
            policy,
            geom,
            movements,
            conflicts,
            transit,
            params,
            zones: ic.zones,
            box_half,
            spawner,
            tick: 0,
            t: 0.0,
            cars: BTreeMap::new(),
            formations: Vec::new(),
            next_vehicle: 1,
            next_formation: 1,
            leg_seq: [0; 4],
            order: Vec::new(),
            tree: SpanningTree { parent: vec![], tree_layer: vec![], layer_sets: vec![] },
            leader: None,
            book: ReservationBook::new(ic.fcfs_buffer),
            ledger: Ledger::default(),
            collision_set: BTreeSet::new(),
            collisions: Vec::new(),
        })
    }

    fn movement(&self, id: usize) -> &Movement {
        &self.movements[id - 1]
    }

    fn lane_of_movement(&self, id: usize) -> u32 {
        self.movement(id).approach_lane
    }

    /// Lanes a car physically overlaps, plus the lane it is changing into.
    fn occupies(&self, c: &Car, lane: u32) -> bool {
        let lane = lane.min(3);
        let occ = occupied_lanes(&c.state, &self.cfg.footprint, self.geom.lane_width);
        (occ.start().min(&3)..=occ.end().min(&3)).contains(&&lane) || c.maneuver.as_ref().is_some_and(|m| m.1 == lane)
    }

    fn s_of(&self, car: &Car) -> f64 {
        car.state.pos_long + self.box_half
    }

    fn outside_spec(&self) -> FormationSpec {
        FormationSpec::new(3, self.cfg.intersection.gap_outside)
    }

    // ---- spawning -------------------------------------------------------

    fn place_arrivals(&mut self) -> Result<()> {
        for leg in Leg::ALL {
            while let Some(arr) = self.spawner.peek(leg.index()).copied() {
                let turn = Turn::ALL[arr.choice];
                if !self.try_place(leg, turn)? {
                    break;
                }
                self.spawner.pop(leg.index());
            }
        }
        Ok(())
    }

    fn lane_clear_at(&self, leg: Leg, lane: u32, x: f64, v: f64) -> bool {
        let len = self.cfg.footprint.length;
        let brake = -self.params.accel_range.min;
        self.cars.values().filter(|c| c.leg == leg && self.s_of(c) < 0.0).all(|c| {
            if !self.occupies(c, lane) {
                return true;
            }
            let dx = c.state.pos_long - x;
            if dx >= 0.0 {
                dx - len >= safe_gap(v, c.state.speed, brake, super::follow::MIN_GAP, self.cfg.dt) + LANE_CHANGE_MARGIN
            } else {
                -dx - len >= safe_gap(c.state.speed, v, brake, super::follow::MIN_GAP, self.cfg.dt) + LANE_CHANGE_MARGIN
            }
        })
    }

    fn try_place(&mut self, leg: Leg, turn: Turn) -> Result<bool> {
        let ic = &self.cfg.intersection;
        let x_spawn = -self.zones.r3;
        let v0 = self.zones.v0_des;
        let movement = Movement::id_of(leg, turn);

        // join the newest formation on this leg if its next slot is close
        let candidate = self
            .formations
            .iter()
            .enumerate()
            .filter(|(_, f)| f.leg == leg)
            .max_by_key(|(_, f)| f.seq)
            .map(|(k, _)| k);
        if let Some(k) = candidate {
            let f = &self.formations[k];
            if f.open && f.phase == FormationPhase::Approaching && f.members.len() < ic.max_formation {
                let n = f.members.len() + 1;
                let slots = generate_targets(n, &self.outside_spec());
                let rear = slots[n - 1];
                let slot_x = f.anchor - rear.x_offset;
                if slot_x - x_spawn <= ic.join_slack {
                    if !self.lane_clear_at(leg, rear.lane_id, x_spawn, v0) {
                        return Ok(false);
                    }
                    let id = self.spawn_car(leg, movement, rear.lane_id, k);
                    self.formations[k].members.push(id);
                    self.reslot(k)?;
                    return Ok(true);
                }
                self.formations[k].open = false;
            }
        }

        // otherwise start a new formation behind everything on the leg
        let room = self
            .cars
            .values()
            .filter(|c| c.leg == leg)
            .all(|c| c.state.pos_long - x_spawn >= ic.gap_outside + self.cfg.footprint.length);
        if !room {
            return Ok(false);
        }
        self.leg_seq[leg.index()] += 1;
        let f = Formation {
            id: self.next_formation,
            leg,
            seq: self.leg_seq[leg.index()],
            anchor: x_spawn,
            anchor_speed: v0,
            members: Vec::new(),
            phase: FormationPhase::initial(zone_of(self.zones.r3, &self.zones)),
            subs: Vec::new(),
            open: true,
        };
        self.next_formation += 1;
        self.formations.push(f);
        let k = self.formations.len() - 1;
        let id = self.spawn_car(leg, movement, 1, k);
        self.formations[k].members.push(id);
        Ok(true)
    }

    fn spawn_car(&mut self, leg: Leg, movement: usize, lane: u32, formation_idx: usize) -> usize {
        let id = self.next_vehicle;
        self.next_vehicle += 1;
        let f = &self.formations[formation_idx];
        let car = Car {
            id,
            leg,
            movement,
            state: VehicleState::on_lane(-self.zones.r3, lane, self.zones.v0_des, self.geom.lane_width),
            accel_meas: 0.0,
            target_lane: lane,
            maneuver: None,
            slot_offset: 0.0,
            formation: Some(f.id),
            seq: f.seq,
            group: None,
            reservation: None,
            cleared: false,
        };
        self.cars.insert(id, car);
        self.ledger.spawned += 1;
        id
    }

    /// Optimal re-slotting of an approaching formation after a join.
    fn reslot(&mut self, k: usize) -> Result<()> {
        let f = &self.formations[k];
        let slots = generate_targets(f.members.len(), &self.outside_spec());
        let vehicles: Vec<VehiclePos> = f
            .members
            .iter()
            .map(|id| {
                let c = &self.cars[id];
                VehiclePos { pos_long: c.state.pos_long, lane: c.maneuver.as_ref().map_or(c.state.lane_id, |m| m.1) }
            })
            .collect();
        let costs = build_cost_matrix(&vehicles, &slots, f.anchor, &self.cfg.weights)?;
        let asg = solve_assignment(&costs);
        let members = f.members.clone();
        for (i, id) in members.iter().enumerate() {
            let slot = slots[asg.slot_of[i]];
            let c = self.cars.get_mut(id).expect("member exists");
            c.slot_offset = slot.x_offset;
            c.target_lane = slot.lane_id;
        }
        Ok(())
    }

    // ---- formations -----------------------------------------------------

    /// Move every formation anchor one tick, holding it one gap behind the
    /// rearmost vehicle ahead on its leg.
    fn advance_anchors(&mut self) {
        let dt = self.cfg.dt;
        let v0 = self.zones.v0_des;
        let gap = self.cfg.intersection.gap_outside;
        for k in 0..self.formations.len() {
            let (leg, seq, anchor) = {
                let f = &self.formations[k];
                (f.leg, f.seq, f.anchor)
            };
            let binding = self
                .cars
                .values()
                .filter(|c| c.leg == leg && c.seq < seq && self.s_of(c) < 0.0)
                .min_by(|a, b| a.state.pos_long.total_cmp(&b.state.pos_long))
                .map(|c| (c.state.pos_long - gap - self.cfg.footprint.length, c.state.speed));
            let free = anchor + v0 * dt;
            let (new_anchor, speed) = match binding {
                Some((limit, v)) if limit < free => (limit.max(anchor), v.min(v0)),
                _ => (free, v0),
            };
            let f = &mut self.formations[k];
            f.anchor = new_anchor;
            f.anchor_speed = speed;
        }
    }

    fn update_formations(&mut self) -> Result<()> {
        self.formations.retain(|f| !f.members.is_empty());
        for k in 0..self.formations.len() {
            let f = &self.formations[k];
            let lead_d = f
                .members
                .iter()
                .map(|id| -self.cars[id].state.pos_long)
                .fold(f64::INFINITY, f64::min);
            let zone = zone_of(lead_d, &self.zones);
            let forced = zone == Zone::Coordinating;
            let inp = PhaseInputs {
                lead_zone: zone,
                division_done: forced || self.members_on_refs(k),
                lane_change_done: forced || self.members_on_lanes(k),
                tightened: forced || self.members_on_refs(k),
            };
            let old = self.formations[k].phase;
            let new = old.next(&inp);
            if new != old {
                self.formations[k].phase = new;
                self.enter_phase(k, new)?;
            }
        }
        Ok(())
    }

    fn members_on_refs(&self, k: usize) -> bool {
        let f = &self.formations[k];
        let tol = self.cfg.intersection.division_tol;
        f.members.iter().all(|id| {
            let c = &self.cars[id];
            (c.state.pos_long - (f.anchor - c.slot_offset)).abs() < tol
        })
    }

    fn members_on_lanes(&self, k: usize) -> bool {
        let tol = self.cfg.intersection.lateral_tol;
        self.formations[k].members.iter().all(|id| {
            let c = &self.cars[id];
            c.maneuver.is_none()
                && c.state.lane_id == c.target_lane
                && (c.state.pos_lat - lane_center(c.target_lane, self.geom.lane_width)).abs() < tol
        })
    }

    fn enter_phase(&mut self, k: usize, phase: FormationPhase) -> Result<()> {
        match phase {
            FormationPhase::Dividing => {
                self.formations[k].open = false;
                let members: Vec<Member> = self.formations[k]
                    .members
                    .iter()
                    .map(|id| {
                        let c = &self.cars[id];
                        Member {
                            vehicle_id: c.id,
                            movement_id: c.movement,
                            pos_long: c.state.pos_long,
                            lane: c.maneuver.as_ref().map_or(c.state.lane_id, |m| m.1),
                            slot_offset: c.slot_offset,
                        }
                    })
                    .collect();
                let plan = split_by_movement(&members, &self.outside_spec());
                for sub in &plan.subformations {
                    for (j, id) in sub.member_ids.iter().enumerate() {
                        let c = self.cars.get_mut(id).expect("member exists");
                        c.slot_offset = sub.band_offset + sub.offsets[j];
                        c.target_lane = sub.lanes[j];
                    }
                }
                self.formations[k].subs = plan.subformations;
            }
            FormationPhase::LaneChanging => {
                let ic = &self.cfg.intersection;
                let ctx = ManeuverContext {
                    params: &self.params,
                    lane_width: self.geom.lane_width,
                    long_span: ic.lane_change_span,
                    max_span: 4.0 * ic.lane_change_span,
                    weights: &self.cfg.weights,
                };
                let subs = std::mem::take(&mut self.formations[k].subs);
                let mut new_subs = Vec::with_capacity(subs.len());
                for sub in subs {
                    let states: Vec<VehicleState> = sub.member_ids.iter().map(|id| self.cars[id].state).collect();
                    let permitted = [self.lane_of_movement(sub.movement_id)];
                    let (ns, orders) = plan_lane_changes(&sub, &permitted, &states, &ctx)?;
                    for o in &orders {
                        let c = self.cars.get_mut(&o.vehicle_id).expect("member exists");
                        c.target_lane = o.target_lane;
                        c.slot_offset = ns.band_offset + o.offset;
                    }
                    new_subs.push(ns);
                }
                self.formations[k].subs = new_subs;
            }
            FormationPhase::Adjusting => {
                let gap = self.cfg.intersection.gap_inside;
                let subs: Vec<Subformation> = self.formations[k].subs.iter().map(|s| tighten(s, gap)).collect();
                for sub in &subs {
                    for (j, id) in sub.member_ids.iter().enumerate() {
                        if let Some(c) = self.cars.get_mut(id) {
                            c.slot_offset = sub.band_offset + sub.offsets[j];
                        }
                    }
                }
                self.formations[k].subs = subs;
            }
            FormationPhase::Approaching | FormationPhase::MergeCheck | FormationPhase::Coordinating => {}
        }
        Ok(())
    }

    // ---- hand-over at the coordinating radius ---------------------------

    fn enter_coordination(&mut self) -> Result<()> {
        let r1 = self.zones.r1;
        let arriving: Vec<usize> = self
            .cars
            .values()
            .filter(|c| c.formation.is_some() && -c.state.pos_long <= r1)
            .map(|c| c.id)
            .collect();
        for id in arriving {
            if self.cars[&id].formation.is_none() {
                continue; // handed over with its subformation this tick
            }
            match self.policy {
                Policy::MultiVp => self.enter_as_subformation(id)?,
                Policy::SingleVp => {
                    self.detach(&[id]);
                    self.add_group(vec![id]);
                }
                Policy::Fcfs => {
                    self.detach(&[id]);
                    self.request_reservation(id);
                }
                Policy::RandomLane => unreachable!("rejected at construction"),
            }
        }
        Ok(())
    }

    fn detach(&mut self, ids: &[usize]) {
        for id in ids {
            let c = self.cars.get_mut(id).expect("car exists");
            if let Some(fid) = c.formation.take() {
                if let Some(f) = self.formations.iter_mut().find(|f| f.id == fid) {
                    f.members.retain(|m| m != id);
                    for s in &mut f.subs {
                        if let Some(p) = s.member_ids.iter().position(|m| m == id) {
                            s.member_ids.remove(p);
                            s.lanes.remove(p);
                            s.offsets.remove(p);
                        }
                    }
                    f.subs.retain(|s| !s.member_ids.is_empty());
                }
            }
        }
    }

    fn enter_as_subformation(&mut self, id: usize) -> Result<()> {
        let fid = self.cars[&id].formation.expect("in a formation");
        let sub_members: Vec<usize> = self
            .formations
            .iter()
            .find(|f| f.id == fid)
            .and_then(|f| f.subs.iter().find(|s| s.member_ids.contains(&id)))
            .map_or_else(|| vec![id], |s| s.member_ids.clone());
        self.detach(&sub_members);
        self.add_group(sub_members);
        Ok(())
    }

    fn add_group(&mut self, mut members: Vec<usize>) {
        members.sort_by(|a, b| self.cars[b].state.pos_long.total_cmp(&self.cars[a].state.pos_long).then(a.cmp(b)));
        let lead = members[0];
        let movement = self.cars[&lead].movement;
        let gap = self.cfg.intersection.gap_inside;
        let group = VehicleGroup {
            group_id: lead,
            movement_id: movement,
            member_offsets: (0..members.len()).map(|k| k as f64 * gap).collect(),
            member_ids: members,
            lead_dist: -self.cars[&lead].state.pos_long,
        };
        if self.policy == Policy::MultiVp && self.merge_into_previous(&group) {
            return;
        }
        for m in &group.member_ids {
            self.cars.get_mut(m).expect("car exists").group = Some(group.group_id);
        }
        let (order, tree) =
            regroup_tree_on_change(&self.order, Some(TreeEvent::Entered(group)), &self.conflicts, self.box_half);
        self.order = order;
        self.tree = tree;
    }

    /// Append a fresh subformation to the last group of the same movement
    /// when that group is close ahead, nothing foreign sits between them,
    /// and no later group would lose priority to the extended tail.
    fn merge_into_previous(&mut self, g: &VehicleGroup) -> bool {
        let Some(k) = self.order.iter().rposition(|o| o.movement_id == g.movement_id) else {
            return false;
        };
        if self.order[k + 1..].iter().any(|o| self.conflicts.groups_conflict(o.movement_id, g.movement_id)) {
            return false;
        }
        let prev = &self.order[k];
        let tail = *prev.member_ids.last().expect("non-empty group");
        if self.s_of(&self.cars[&tail]) >= 0.0 {
            return false;
        }
        let lane = self.lane_of_movement(g.movement_id);
        let as_sub = |grp: &VehicleGroup| Subformation {
            movement_id: grp.movement_id,
            member_ids: grp.member_ids.clone(),
            lanes: vec![lane; grp.member_ids.len()],
            offsets: grp.member_offsets.clone(),
            band_offset: 0.0,
            slot_gap: self.cfg.intersection.gap_inside,
        };
        let a = as_sub(prev);
        let b = as_sub(g);
        let a_anchor = self.cars[&prev.member_ids[0]].state.pos_long;
        let b_anchor = self.cars[&g.member_ids[0]].state.pos_long;
        let leg = self.cars[&g.member_ids[0]].leg;
        let foreign: Vec<f64> = self
            .cars
            .values()
            .filter(|c| c.leg == leg && self.s_of(c) < 0.0)
            .filter(|c| self.occupies(c, lane))
            .filter(|c| !a.member_ids.contains(&c.id) && !b.member_ids.contains(&c.id))
            .map(|c| c.state.pos_long)
            .collect();
        let range = self.cfg.intersection.merge_range.unwrap_or(2.0 * self.cfg.intersection.gap_outside);
        let Some((merged, _)) = try_merge(&a, a_anchor, &b, b_anchor, range, &foreign) else {
            return false;
        };
        let gid = self.order[k].group_id;
        for m in &g.member_ids {
            self.cars.get_mut(m).expect("car exists").group = Some(gid);
        }
        self.order[k].member_ids = merged.member_ids;
        self.order[k].member_offsets = merged.offsets;
        self.tree = build_spanning_tree(&self.order, &self.conflicts);
        true
    }

    fn request_reservation(&mut self, id: usize) {
        let c = &self.cars[&id];
        let d = -c.state.pos_long;
        let req = ReservationRequest {
            vehicle_id: id,
            movement_id: c.movement,
            arrival: self.t + (d - self.box_half).max(0.0) / self.zones.v0_des,
            transit: self.transit[c.movement - 1],
        };
        self.book.release_before(self.t);
        let r = self.book.reserve(&req, &self.conflicts);
        self.cars.get_mut(&id).expect("car exists").reservation = Some(r);
    }

    // ---- control --------------------------------------------------------

    fn lane_index(&self) -> LaneIndex {
        let mut idx: LaneIndex = vec![Vec::new(); N_KEYS];
        for c in self.cars.values() {
            for (key, coord) in self.memberships(c) {
                idx[key].push((coord, c.id, c.state.speed));
            }
        }
        for v in &mut idx {
            v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        idx
    }

    fn memberships(&self, c: &Car) -> Vec<(usize, f64)> {
        let s = self.s_of(c);
        let mv = self.movement(c.movement);
        let len = mv.path_length();
        let mut out = Vec::with_capacity(2);
        if s <= len {
            for lane in 1..=3 {
                if self.occupies(c, lane) {
                    out.push((approach_key(c.leg, lane), c.state.pos_long));
                }
            }
        }
        if s >= 0.0 {
            out.push((exit_key(mv.exit_leg, mv.exit_lane), s - len));
        }
        out
    }

    /// Nearest leader over all lanes the car occupies: (bumper gap, speed).
    fn leader(&self, idx: &LaneIndex, c: &Car) -> Option<(f64, f64)> {
        let len = self.cfg.footprint.length;
        self.memberships(c)
            .into_iter()
            .filter_map(|(key, coord)| {
                idx[key]
                    .iter()
                    .filter(|e| e.1 != c.id && (e.0 > coord || (e.0 == coord && e.1 < c.id)))
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|e| (e.0 - coord - len, e.2))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Virtual-platoon targets in the distance coordinate: (d_ref, v_ref)
    /// per vehicle in a group.
    fn platoon_targets(&mut self) -> BTreeMap<usize, (f64, f64)> {
        let mut out = BTreeMap::new();
        if self.order.is_empty() {
            return out;
        }
        for g in &mut self.order {
            g.lead_dist = -self.cars[&g.member_ids[0]].state.pos_long;
        }
        let d_t = self.zones.d_t;
        let leader = *self.leader.get_or_insert_with(|| VirtualLeader::anchored(self.order[0].lead_dist, &self.zones));
        let refs = reference_positions(&self.tree, &self.order, &self.zones, leader.pos);
        let tails: Vec<(f64, f64)> = self
            .order
            .iter()
            .map(|g| {
                let c = &self.cars[g.member_ids.last().expect("non-empty")];
                (-c.state.pos_long, c.state.speed)
            })
            .collect();
        let mut r = 0;
        for (k, g) in self.order.iter().enumerate() {
            let lead = &self.cars[&g.member_ids[0]];
            let mut target = g.lead_dist;
            let mut v_ref = self.zones.v0_des;
            let eq13 = refs[r].ref_dist;
            if eq13 > target {
                target = eq13;
            }
            for (u, pred) in self.order[..k].iter().enumerate() {
                if self.conflicts.groups_conflict(pred.movement_id, g.movement_id) {
                    let guard = tails[u].0 + d_t;
                    if guard > target {
                        target = guard;
                        v_ref = tails[u].1;
                    }
                }
            }
            out.insert(g.member_ids[0], (target, v_ref));
            for (m, off) in g.member_ids.iter().zip(&g.member_offsets).skip(1) {
                out.insert(*m, (g.lead_dist + off, lead.state.speed));
            }
            r += g.member_ids.len();
        }
        out
    }

    fn reservation_targets(&self) -> BTreeMap<usize, (f64, f64)> {
        let mut out = BTreeMap::new();
        let mut active: Vec<&Car> =
            self.cars.values().filter(|c| c.reservation.is_some() && !c.cleared).collect();
        active.sort_by(|a, b| {
            let (ra, rb) = (a.reservation.unwrap(), b.reservation.unwrap());
            ra.entry.total_cmp(&rb.entry).then(a.id.cmp(&b.id))
        });
        let v0 = self.zones.v0_des;
        for (k, c) in active.iter().enumerate() {
            let r = c.reservation.unwrap();
            let d = -c.state.pos_long;
            let mut target = d;
            let mut v_ref = v0;
            let scheduled = self.box_half + v0 * (r.entry - self.t);
            if scheduled > target {
                target = scheduled;
            }
            for p in &active[..k] {
                if self.conflicts.groups_conflict(p.movement, c.movement) {
                    let guard = -p.state.pos_long + self.zones.d_t;
                    if guard > target {
                        target = guard;
                        v_ref = p.state.speed;
                    }
                }
            }
            out.insert(c.id, (target, v_ref));
        }
        out
    }

    fn lane_keep_steer(&self, st: &VehicleState, preview: f64) -> f64 {
        let center = lane_center(lane_of(st.pos_lat, self.geom.lane_width).min(3), self.geom.lane_width);
        let alpha = (center - st.pos_lat).atan2(preview) - st.yaw.to_radians();
        let steer = (2.0 * self.params.wheelbase * alpha.sin() / preview).atan().to_degrees();
        self.params.steer_range.clamp(steer)
    }

    /// Start a one-lane hop toward the car's target lane if the gap allows.
    fn try_start_maneuver(&self, idx: &LaneIndex, c: &Car) -> Option<(LaneChangeTrajectory, u32)> {
        let lane = c.state.lane_id;
        if c.maneuver.is_some() || lane == c.target_lane {
            return None;
        }
        let span = self.cfg.intersection.lane_change_span;
        if c.state.pos_long + 2.0 * span > -self.box_half - 5.0 {
            return None;
        }
        let hop = crate::regrouping::next_lane_toward(lane, c.target_lane);
        let len = self.cfg.footprint.length;
        let brake = -self.params.accel_range.min;
        let x = c.state.pos_long;
        let v = c.state.speed;
        let clear = idx[approach_key(c.leg, hop)].iter().filter(|e| e.1 != c.id).all(|&(cx, _, cv)| {
            let dx = cx - x;
            if dx >= 0.0 {
                dx - len >= safe_gap(v, cv, brake, super::follow::MIN_GAP, self.cfg.dt) + LANE_CHANGE_MARGIN
            } else {
                -dx - len >= safe_gap(cv, v, brake, super::follow::MIN_GAP, self.cfg.dt) + LANE_CHANGE_MARGIN
            }
        });
        if !clear {
            return None;
        }
        let start = Point2::new(x, c.state.pos_lat);
        let traj = bezier_lane_change(start, hop, self.geom.lane_width, span, v.max(1.0), &self.params, 4.0 * span).ok()?;
        Some((traj, hop))
    }

    fn controls(&mut self) -> Result<Vec<(usize, ControlInput)>> {
        let targets = match self.policy {
            Policy::Fcfs => self.reservation_targets(),
            _ => self.platoon_targets(),
        };
        let mut idx = self.lane_index();

        // lane-change starts, one car at a time so later checks see earlier starts
        let ids: Vec<usize> = self.cars.keys().copied().collect();
        for id in &ids {
            let c = &self.cars[id];
            if self.s_of(c) >= 0.0 {
                continue;
            }
            if let Some((traj, hop)) = self.try_start_maneuver(&idx, c) {
                let key = approach_key(c.leg, hop);
                let entry = (c.state.pos_long, c.id, c.state.speed);
                let pos = idx[key].partition_point(|e| e.0 < entry.0);
                idx[key].insert(pos, entry);
                self.cars.get_mut(id).expect("car exists").maneuver = Some((traj, hop));
            }
        }

        let v0 = self.zones.v0_des;
        let headway = self.cfg.intersection.headway;
        let gains = self.cfg.gains;
        let mut out = Vec::with_capacity(self.cars.len());
        for c in self.cars.values() {
            let s = self.s_of(c);
            let x = c.state.pos_long;
            let (mut x_ref, mut v_ref) = if c.cleared {
                (x, v0)
            } else if let Some(&(d_ref, v)) = targets.get(&c.id) {
                (-d_ref, v)
            } else if let Some(fid) = c.formation {
                let f = self.formations.iter().find(|f| f.id == fid).expect("formation exists");
                (f.anchor - c.slot_offset, f.anchor_speed)
            } else {
                (x, v0)
            };
            if s < 0.0 {
                let lane_ok = c.state.lane_id == self.lane_of_movement(c.movement)
                    && c.maneuver.is_none()
                    && (c.state.pos_lat - lane_center(c.state.lane_id, self.geom.lane_width)).abs() < ALIGN_TOL;
                let hold = -self.box_half - STOP_LINE_SETBACK;
                if !lane_ok && x_ref > hold {
                    x_ref = hold.max(x);
                    v_ref = 0.0;
                }
            }
            let mut accel = longitudinal_accel(&c.state, x_ref, v_ref, &gains, &self.params)?;
            if let Some((gap, v_lead)) = self.leader(&idx, c) {
                accel = accel.min(follow_accel(gap, c.state.speed, v_lead, headway, gains.k_p, gains.k_v));
                accel = self.params.accel_range.clamp(accel);
                accel = safety_clamp(accel, gap, c.state.speed, v_lead, &self.params.accel_range, self.cfg.dt);
            }
            let steer = if s < 0.0 {
                let preview = (0.6 * c.state.speed).max(5.0);
                match &c.maneuver {
                    Some((traj, _)) => preview_steering(&c.state, traj, preview, &self.params)?,
                    None => self.lane_keep_steer(&c.state, preview),
                }
            } else {
                0.0
            };
            out.push((c.id, ControlInput { accel, steer }));
        }
        Ok(out)
    }

    fn integrate(&mut self, controls: Vec<(usize, ControlInput)>) -> Result<()> {
        let dt = self.cfg.dt;
        let w = self.geom.lane_width;
        let tol = self.cfg.intersection.lateral_tol;
        for (id, input) in controls {
            let box_half = self.box_half;
            let params = self.params;
            let c = self.cars.get_mut(&id).expect("car exists");
            let v_old = c.state.speed;
            if c.state.pos_long + box_half < 0.0 {
                let mut next = step_kinematics(&c.state, input, dt, &params, w)?;
                if next.pos_long + box_half >= 0.0 {
                    next.pos_lat = lane_center(next.lane_id, w);
                    next.yaw = 0.0;
                }
                c.state = next;
                if let Some((traj, hop)) = &c.maneuver {
                    if c.state.pos_long > traj.end().x {
                        let off = (c.state.pos_lat - lane_center(*hop, w)).abs();
                        if off < tol || c.state.pos_long > traj.end().x + traj.length() {
                            c.maneuver = None;
                        }
                    }
                }
            } else {
                let a = params.accel_range.clamp(input.accel);
                c.state.pos_long += v_old * dt;
                c.state.speed = params.speed_range.clamp(v_old + a * dt);
                c.state.last_accel = a;
            }
            c.accel_meas = (c.state.speed - v_old) / dt;
        }
        Ok(())
    }

    fn handle_exits(&mut self) {
        self.exit_cars();
        if self.order.is_empty() {
            self.leader = None;
        }
    }

    fn exit_cars(&mut self) {
        let len = self.cfg.footprint.length;
        let clearance = self.cfg.intersection.exit_clearance;
        let ids: Vec<usize> = self.cars.keys().copied().collect();
        let mut gone = Vec::new();
        for id in ids {
            let c = &self.cars[&id];
            let s = self.s_of(c);
            let path = self.movement(c.movement).path_length();
            if s > path + len && !c.cleared {
                self.cars.get_mut(&id).expect("car exists").cleared = true;
            }
            if s > path + clearance {
                gone.push(id);
            }
        }
        loop {
            let done = self
                .order
                .iter()
                .find(|g| g.member_ids.iter().all(|m| self.cars.get(m).is_none_or(|c| c.cleared)))
                .map(|g| g.group_id);
            let Some(gid) = done else { break };
            let (order, tree) =
                regroup_tree_on_change(&self.order, Some(TreeEvent::Exited(gid)), &self.conflicts, self.box_half);
            self.order = order;
            self.tree = tree;
        }
        for id in gone {
            let car = self.cars.remove(&id).expect("car exists");
            self.ledger.exited += 1;
            let Some(g) = car.group.and_then(|gid| self.order.iter_mut().find(|g| g.group_id == gid)) else {
                continue;
            };
            if let Some(p) = g.member_ids.iter().position(|m| *m == id) {
                g.member_ids.remove(p);
                g.member_offsets.remove(p);
            }
            if g.member_ids.is_empty() {
                let gid = g.group_id;
                let (order, tree) =
                    regroup_tree_on_change(&self.order, Some(TreeEvent::Exited(gid)), &self.conflicts, self.box_half);
                self.order = order;
                self.tree = tree;
            } else {
                let base = g.member_offsets[0];
                g.member_offsets.iter_mut().for_each(|o| *o -= base);
            }
        }
    }

    fn pose(&self, c: &Car) -> (Point2, f64) {
        let s = self.s_of(c);
        if s >= 0.0 {
            return self.movement(c.movement).pose_at(s);
        }
        let o = c.leg.outward();
        let travel = (-o.0, -o.1);
        let right = (travel.1, -travel.0);
        let d = -c.state.pos_long;
        let off = -c.state.pos_lat + 0.5 * self.geom.lane_width;
        let p = Point2::new(o.0 * d + right.0 * off, o.1 * d + right.1 * off);
        (p, travel.1.atan2(travel.0) + c.state.yaw.to_radians())
    }
}

impl World for IntersectionWorld {
    fn time(&self) -> f64 {
        self.t
    }

    fn step(&mut self) -> Result<()> {
        self.spawner.tick(self.t);
        self.place_arrivals()?;
        self.update_formations()?;
        self.enter_coordination()?;
        let controls = self.controls()?;
        self.integrate(controls)?;
        self.advance_anchors();
        if let Some(l) = &mut self.leader {
            l.advance(&self.zones, self.cfg.dt);
        }
        self.handle_exits();
        self.tick += 1;
        self.t = self.tick as f64 * self.cfg.dt;
        for pair in detect_collisions(&self.footprints(), &self.cfg.footprint) {
            if self.collision_set.insert(pair) {
                self.collisions.push(pair);
            }
        }
        Ok(())
    }

    fn ledger(&self) -> Ledger {
        self.ledger
    }

    fn kinematics(&self) -> Vec<(usize, f64, f64)> {
        self.cars.values().map(|c| (c.id, c.state.speed, c.accel_meas)).collect()
    }

    fn bin_coordinates(&self) -> Vec<f64> {
        self.cars.values().map(|c| (-c.state.pos_long).max(0.0)).collect()
    }

    fn road_length(&self) -> f64 {
        self.zones.r3
    }

    fn footprints(&self) -> Vec<(usize, Obb)> {
        self.cars
            .values()
            .map(|c| {
                let (p, h) = self.pose(c);
                (c.id, Obb::new(p, h, &self.cfg.footprint))
            })
            .collect()
    }

    fn collisions(&self) -> &[(usize, usize)] {
        &self.collisions
    }

    fn generated(&self) -> usize {
        self.spawner.generated()
    }

    fn deferred(&self) -> usize {
        self.spawner.waiting()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> ScenarioConfig {
        let mut cfg = ScenarioConfig::intersection();
        cfg.intersection.throughput_vph = 0.0;
        cfg.duration = 5.0;
        cfg
    }

    #[test]
    fn empty_world_stays_empty() {
        let mut w = IntersectionWorld::new(&quiet(), Policy::MultiVp).unwrap();
        for _ in 0..50 {
            w.step().unwrap();
        }
        assert!(w.kinematics().is_empty());
        assert_eq!(w.ledger(), Ledger::default());
    }

    #[test]
    fn lone_vehicle_crosses_at_desired_speed() {
        for policy in [Policy::MultiVp, Policy::SingleVp, Policy::Fcfs] {
            let mut w = IntersectionWorld::new(&quiet(), policy).unwrap();
            // left turners spawn on their own lane and never change lanes
            assert!(w.try_place(Leg::South, Turn::Left).unwrap());
            let path = w.movement(Movement::id_of(Leg::South, Turn::Left)).path_length();
            let mut steps = 0;
            while w.ledger().exited == 0 && steps < 20_000 {
                w.step().unwrap();
                steps += 1;
                for (_, v, _) in w.kinematics() {
                    assert!((v - 10.0).abs() < 1e-6, "{policy}: speed {v}");
                }
            }
            assert_eq!(w.ledger().exited, 1, "{policy}");
            assert!(w.collisions().is_empty());
            let t = steps as f64 * 0.04;
            let expected = (800.0 - 12.0 + path + 30.0) / 10.0;
            assert!((t - expected).abs() < 0.1, "{policy}: {t} vs {expected}");
        }
    }
}
