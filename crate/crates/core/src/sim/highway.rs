//! Multi-lane highway with on- and off-ramps.
//!
//! Main lanes are `1..=n_lanes`; lane `n_lanes + 1` is the ramp lane, which
//! exists only inside the merge and diverge segments. Positions are kept
//! unwrapped; on a ring all distances between vehicles are taken modulo the
//! road length.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assignment::{build_cost_matrix, solve_assignment, VehiclePos};
use crate::baselines::random_lane;
use crate::collision::Obb;
use crate::error::Result;
use crate::formation_geometry::{generate_targets, FormationSpec};
use crate::regrouping::next_lane_toward;
use crate::vehicle_dynamics::{
    bezier_lane_change, lane_center, lane_of, longitudinal_accel, preview_steering, step_kinematics, ControlInput,
    LaneChangeTrajectory, Point2, Range, VehicleParams, VehicleState,
};

use super::follow::{follow_accel, occupied_lanes, safe_gap, safety_clamp, MIN_GAP};
use super::spawn::Spawner;
use super::{detect_collisions, HighwayConfig, Ledger, Policy, ScenarioConfig, World};

/// RNG stream of the random-lane choice.
const LANE_STREAM: u64 = 2;
const LANE_CHANGE_MARGIN: f64 = 2.0;
/// Where a ramp vehicle that found no gap waits, before the merge end (m).
const RAMP_HOLD: f64 = 15.0;
/// Speed deficit of a car waiting for a lane-change gap (m/s).
const GAP_SEEK: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    OnRamp,
    Main,
    Leaving,
}

#[derive(Debug, Clone)]
struct Car {
    id: usize,
    state: VehicleState,
    accel_meas: f64,
    mode: Mode,
    target_lane: u32,
    maneuver: Option<(LaneChangeTrajectory, u32)>,
    /// Unwrapped start of the chosen diverge segment.
    exit_pos: f64,
    /// Unwrapped end of the merge segment the car entered from.
    ramp_end: f64,
    formation: Option<usize>,
    slot_offset: f64,
}

#[derive(Debug, Clone)]
struct Formation {
    id: usize,
    anchor: f64,
    members: Vec<usize>,
}

pub struct HighwayWorld {
    cfg: ScenarioConfig,
    policy: Policy,
    params: VehicleParams,
    spawner: Spawner,
    lane_rng: ChaCha8Rng,
    tick: u64,
    t: f64,
    road: f64,
    cars: BTreeMap<usize, Car>,
    formations: Vec<Formation>,
    next_vehicle: usize,
    next_formation: usize,
    ledger: Ledger,
    collision_set: std::collections::BTreeSet<(usize, usize)>,
    collisions: Vec<(usize, usize)>,
}

impl HighwayWorld {
    pub fn new(cfg: &ScenarioConfig, policy: Policy) -> Result<Self> {
        let h = &cfg.highway;
        let top = h.main_speed_range.max.max(h.ramp_speed_range.max);
        let params = VehicleParams {
            wheelbase: cfg.wheelbase,
            steer_range: cfg.steer_range,
            speed_range: Range::new(0.0, top),
            accel_range: h.accel_range,
        };
        params.validate()?;
        let n = h.n_segments as usize;
        let spawner = Spawner::new(cfg.rng_seed, &vec![h.vgr; n], &vec![1.0; n], cfg.dt);
        let mut lane_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        lane_rng.set_stream(LANE_STREAM);
        Ok(Self {
            cfg: cfg.clone(),
            policy,
            params,
            spawner,
            lane_rng,
            tick: 0,
            t: 0.0,
            road: h.segment_length * h.n_segments as f64,
            cars: BTreeMap::new(),
            formations: Vec::new(),
            next_vehicle: 1,
            next_formation: 1,
            ledger: Ledger::default(),
            collision_set: Default::default(),
            collisions: Vec::new(),
        })
    }

    fn h(&self) -> &HighwayConfig {
        &self.cfg.highway
    }

    fn ramp_lane(&self) -> u32 {
        self.h().n_lanes + 1
    }

    /// Signed separation `b - a`, folded onto the ring.
    fn sep(&self, a: f64, b: f64) -> f64 {
        let d = b - a;
        if self.h().ring {
            d - self.road * (d / self.road + 0.5).floor()
        } else {
            d
        }
    }

    fn ring_pos(&self, x: f64) -> f64 {
        if self.h().ring {
            x.rem_euclid(self.road)
        } else {
            x
        }
    }

    fn lane_span(&self, v: f64) -> f64 {
        (3.0 * v).clamp(20.0, self.h().lane_change_span)
    }

    /// Speed of the current lane. A car waiting to change lanes drops a
    /// little below the slower of the two lanes so gaps slide past it.
    fn desired_speed(&self, c: &Car) -> f64 {
        let n = self.h().n_lanes;
        if c.mode == Mode::OnRamp && c.state.lane_id == self.ramp_lane() {
            return self.h().ramp_speed;
        }
        let speed = |l: u32| self.h().lane_speeds[l.min(n) as usize - 1];
        if c.maneuver.is_none() && c.target_lane != c.state.lane_id && c.target_lane <= n {
            speed(c.state.lane_id).min(speed(c.target_lane)) - GAP_SEEK
        } else {
            speed(c.state.lane_id)
        }
    }

    /// Lanes a car physically overlaps, plus the lane it is changing into.
    fn occupies(&self, c: &Car, lane: u32) -> bool {
        occupied_lanes(&c.state, &self.cfg.footprint, self.h().lane_width).contains(&lane)
            || c.maneuver.as_ref().is_some_and(|m| m.1 == lane)
    }

    fn lanes_of(&self, c: &Car) -> Vec<u32> {
        (1..=self.ramp_lane()).filter(|&l| self.occupies(c, l)).collect()
    }

    // ---- spawning -------------------------------------------------------

    fn place_arrivals(&mut self) {
        for entry in 0..self.spawner.n_entries() {
            while let Some(arr) = self.spawner.peek(entry).copied() {
                if !self.try_place(entry, arr.choice) {
                    break;
                }
                self.spawner.pop(entry);
            }
        }
    }

    /// True when `lane` at `x` has room for a vehicle moving at `v`.
    fn lane_clear(&self, lane: u32, x: f64, v: f64, skip: usize) -> bool {
        let len = self.cfg.footprint.length;
        let brake = -self.params.accel_range.min;
        self.cars.values().filter(|c| c.id != skip && self.occupies(c, lane)).all(|c| {
            let dx = self.sep(x, c.state.pos_long);
            if dx >= 0.0 {
                dx - len >= safe_gap(v, c.state.speed, brake, MIN_GAP, self.cfg.dt) + LANE_CHANGE_MARGIN
            } else {
                -dx - len >= safe_gap(c.state.speed, v, brake, MIN_GAP, self.cfg.dt) + LANE_CHANGE_MARGIN
            }
        })
    }

    fn try_place(&mut self, entry: usize, exit: usize) -> bool {
        let h = self.cfg.highway.clone();
        let h = &h;
        let x = entry as f64 * h.segment_length + h.onramp_offset;
        let ramp_end = x + h.onramp_length;
        let v = h.ramp_speed;
        let lane = self.ramp_lane();
        if !self.lane_clear(lane, x, v, usize::MAX) {
            return false;
        }
        let off = exit as f64 * h.segment_length + h.offramp_offset;
        let mut exit_pos = x + if h.ring { (off - x).rem_euclid(self.road) } else { off - x };
        if h.ring && exit_pos - x < h.exit_prepare + h.onramp_length {
            exit_pos += self.road;
        }
        let id = self.next_vehicle;
        self.next_vehicle += 1;
        let car = Car {
            id,
            state: VehicleState::on_lane(x, lane, v, h.lane_width),
            accel_meas: 0.0,
            mode: Mode::OnRamp,
            target_lane: h.n_lanes,
            maneuver: None,
            exit_pos,
            ramp_end,
            formation: None,
            slot_offset: 0.0,
        };
        self.cars.insert(id, car);
        self.ledger.spawned += 1;
        true
    }

    // ---- formations -----------------------------------------------------

    fn spec(&self) -> FormationSpec {
        FormationSpec::new(self.h().n_lanes - 1, self.h().slot_gap)
    }

    fn rear_offset(&self, n: usize) -> f64 {
        crate::formation_geometry::formation_extent(n, &self.spec())
    }

    /// Join the best formation in reach, start a new one, or keep waiting
    /// on the transition lane.
    fn join_formation(&mut self, id: usize) -> Result<()> {
        let x = self.cars[&id].state.pos_long;
        let gap = self.h().slot_gap;
        let reach = self.h().join_reach;
        let spans: Vec<(usize, f64, f64)> = self
            .formations
            .iter()
            .map(|f| (f.id, f.anchor, f.anchor - self.rear_offset(f.members.len())))
            .collect();
        let mut best: Option<(f64, usize)> = None;
        for (k, f) in self.formations.iter().enumerate() {
            let rear = f.anchor - self.rear_offset(f.members.len() + 1);
            let dist = self.sep(x, rear).abs();
            if dist > reach {
                continue;
            }
            // the grown tail must stay clear of the formation behind
            let blocked = spans.iter().any(|&(gid, anchor, _)| {
                gid != f.id && {
                    let behind = self.sep(anchor, f.anchor);
                    behind > 0.0 && behind <= self.sep(rear, f.anchor) + gap
                }
            });
            if !blocked && best.is_none_or(|(d, _)| dist < d) {
                best = Some((dist, k));
            }
        }
        if let Some((_, k)) = best {
            self.formations[k].members.push(id);
            self.cars.get_mut(&id).expect("car exists").formation = Some(self.formations[k].id);
            return self.reslot(k);
        }
        let crowded = spans.iter().any(|&(_, anchor, rear)| {
            self.sep(x, anchor) > -gap - reach && self.sep(x, rear) < gap + reach
        });
        if crowded {
            return Ok(());
        }
        let f = Formation { id: self.next_formation, anchor: x, members: vec![id] };
        self.next_formation += 1;
        let c = self.cars.get_mut(&id).expect("car exists");
        c.formation = Some(f.id);
        c.slot_offset = 0.0;
        c.target_lane = 1;
        self.formations.push(f);
        Ok(())
    }

    fn leave_formation(&mut self, id: usize) -> Result<()> {
        let Some(fid) = self.cars.get_mut(&id).expect("car exists").formation.take() else {
            return Ok(());
        };
        let Some(k) = self.formations.iter().position(|f| f.id == fid) else {
            return Ok(());
        };
        self.formations[k].members.retain(|m| *m != id);
        if self.formations[k].members.is_empty() {
            self.formations.remove(k);
            return Ok(());
        }
        self.reslot(k)
    }

    fn reslot(&mut self, k: usize) -> Result<()> {
        let f = &self.formations[k];
        let slots = generate_targets(f.members.len(), &self.spec());
        let vehicles: Vec<VehiclePos> = f
            .members
            .iter()
            .map(|id| {
                let c = &self.cars[id];
                VehiclePos {
                    pos_long: f.anchor + self.sep(f.anchor, c.state.pos_long),
                    lane: c.maneuver.as_ref().map_or(c.state.lane_id, |m| m.1),
                }
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

    // ---- modes ----------------------------------------------------------

    fn update_modes(&mut self) -> Result<()> {
        let n_lanes = self.h().n_lanes;
        let ramp = self.ramp_lane();
        let prepare = self.h().exit_prepare;
        let off_len = self.h().offramp_length;
        let ids: Vec<usize> = self.cars.keys().copied().collect();
        for id in ids {
            let c = &self.cars[&id];
            let x = c.state.pos_long;
            match c.mode {
                Mode::OnRamp if c.state.lane_id <= n_lanes && c.maneuver.is_none() => {
                    self.cars.get_mut(&id).expect("car exists").mode = Mode::Main;
                    match self.policy {
                        Policy::RandomLane => {
                            let lane = random_lane(&mut self.lane_rng, n_lanes);
                            self.cars.get_mut(&id).expect("car exists").target_lane = lane;
                        }
                        _ => self.join_formation(id)?,
                    }
                }
                Mode::Main if c.exit_pos - x <= prepare => {
                    self.leave_formation(id)?;
                    let c = self.cars.get_mut(&id).expect("car exists");
                    c.mode = Mode::Leaving;
                    c.target_lane = n_lanes;
                }
                Mode::Main if c.formation.is_none() && self.policy == Policy::MultiVp => self.join_formation(id)?,
                Mode::Leaving => {
                    let half = 0.5 * self.lane_span(c.state.speed);
                    let c = self.cars.get_mut(&id).expect("car exists");
                    if x > c.exit_pos + off_len && c.maneuver.is_none() && c.state.lane_id != ramp {
                        // missed the diverge; take the same ramp next lap
                        c.exit_pos += self.road;
                        c.mode = Mode::Main;
                    } else if x >= c.exit_pos - half && c.state.lane_id == n_lanes {
                        c.target_lane = ramp;
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    // ---- control --------------------------------------------------------

    fn leader(&self, c: &Car) -> Option<(f64, f64)> {
        let len = self.cfg.footprint.length;
        let mine = self.lanes_of(c);
        self.cars
            .values()
            .filter(|o| o.id != c.id)
            .filter(|o| mine.iter().any(|&l| self.occupies(o, l)))
            .filter_map(|o| {
                let dx = self.sep(c.state.pos_long, o.state.pos_long);
                (dx > 0.0 || (dx == 0.0 && o.id < c.id)).then_some((dx - len, o.state.speed))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    fn may_change_now(&self, c: &Car, hop: u32) -> bool {
        let h = self.h();
        let x = c.state.pos_long;
        let half = 0.5 * self.lane_span(c.state.speed);
        let ramp = self.ramp_lane();
        if hop == ramp {
            c.mode == Mode::Leaving && x >= c.exit_pos - half && x + half <= c.exit_pos + h.offramp_length
        } else if c.state.lane_id == ramp {
            x + half <= c.ramp_end
        } else {
            true
        }
    }

    fn try_start_maneuver(&self, c: &Car) -> Option<(LaneChangeTrajectory, u32)> {
        if c.maneuver.is_some() || c.state.lane_id == c.target_lane {
            return None;
        }
        let hop = next_lane_toward(c.state.lane_id, c.target_lane);
        if !self.may_change_now(c, hop) || !self.lane_clear(hop, c.state.pos_long, c.state.speed, c.id) {
            return None;
        }
        let span = self.lane_span(c.state.speed);
        let start = Point2::new(c.state.pos_long, c.state.pos_lat);
        let traj =
            bezier_lane_change(start, hop, self.h().lane_width, span, c.state.speed.max(1.0), &self.params, 4.0 * span)
                .ok()?;
        Some((traj, hop))
    }

    fn lane_keep_steer(&self, st: &VehicleState, preview: f64) -> f64 {
        let w = self.h().lane_width;
        let center = lane_center(lane_of(st.pos_lat, w).clamp(1, self.ramp_lane()), w);
        let alpha = (center - st.pos_lat).atan2(preview) - st.yaw.to_radians();
        let steer = (2.0 * self.params.wheelbase * alpha.sin() / preview).atan().to_degrees();
        self.params.steer_range.clamp(steer)
    }

    fn controls(&mut self) -> Result<Vec<(usize, ControlInput)>> {
        let ids: Vec<usize> = self.cars.keys().copied().collect();
        for id in &ids {
            if let Some(m) = self.try_start_maneuver(&self.cars[id]) {
                self.cars.get_mut(id).expect("car exists").maneuver = Some(m);
            }
        }
        let gains = self.cfg.gains;
        let headway = self.h().headway;
        let ramp = self.ramp_lane();
        let mut out = Vec::with_capacity(ids.len());
        for c in self.cars.values() {
            let x = c.state.pos_long;
            let (mut x_ref, mut v_ref) = match c.formation.and_then(|fid| self.formations.iter().find(|f| f.id == fid)) {
                Some(f) => (x + self.sep(x, f.anchor - c.slot_offset), self.h().lane_speeds[0]),
                None => (x, self.desired_speed(c)),
            };
            if c.state.lane_id == ramp && c.maneuver.is_none() && c.mode == Mode::OnRamp {
                let hold = c.ramp_end - RAMP_HOLD;
                if x_ref > hold {
                    x_ref = hold.max(x);
                    v_ref = v_ref.min(((hold - x).max(0.0) * 2.0 * -self.params.accel_range.min).sqrt());
                }
            }
            let mut accel = longitudinal_accel(&c.state, x_ref, v_ref, &gains, &self.params)?;
            if let Some((gap, v_lead)) = self.leader(c) {
                accel = accel.min(follow_accel(gap, c.state.speed, v_lead, headway, gains.k_p, gains.k_v));
                accel = self.params.accel_range.clamp(accel);
                accel = safety_clamp(accel, gap, c.state.speed, v_lead, &self.params.accel_range, self.cfg.dt);
            }
            let preview = (0.6 * c.state.speed).max(5.0);
            let steer = match &c.maneuver {
                Some((traj, _)) => preview_steering(&c.state, traj, preview, &self.params)?,
                None => self.lane_keep_steer(&c.state, preview),
            };
            out.push((c.id, ControlInput { accel, steer }));
        }
        Ok(out)
    }

    fn integrate(&mut self, controls: Vec<(usize, ControlInput)>) -> Result<()> {
        let dt = self.cfg.dt;
        let w = self.h().lane_width;
        let ramp = self.ramp_lane();
        let params = self.params;
        let mut gone = Vec::new();
        for (id, input) in controls {
            let c = self.cars.get_mut(&id).expect("car exists");
            let v_old = c.state.speed;
            c.state = step_kinematics(&c.state, input, dt, &params, w)?;
            c.accel_meas = (c.state.speed - v_old) / dt;
            if let Some((traj, hop)) = &c.maneuver {
                let x_end = traj.end().x;
                let off = (c.state.pos_lat - lane_center(*hop, w)).abs();
                if c.state.pos_long > x_end && (off < 0.2 || c.state.pos_long > x_end + traj.length()) {
                    c.maneuver = None;
                }
            }
            if c.mode == Mode::Leaving && c.state.lane_id == ramp {
                gone.push(id);
            }
        }
        if !self.h().ring {
            let end = self.road;
            gone.extend(self.cars.values().filter(|c| c.state.pos_long >= end).map(|c| c.id));
        }
        for id in gone {
            self.leave_formation(id)?;
            self.cars.remove(&id);
            self.ledger.exited += 1;
        }
        Ok(())
    }
}

impl World for HighwayWorld {
    fn time(&self) -> f64 {
        self.t
    }

    fn step(&mut self) -> Result<()> {
        self.spawner.tick(self.t);
        self.place_arrivals();
        self.update_modes()?;
        let controls = self.controls()?;
        self.integrate(controls)?;
        let v = self.h().lane_speeds[0];
        let dt = self.cfg.dt;
        for f in &mut self.formations {
            f.anchor += v * dt;
        }
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
        self.cars.values().map(|c| self.ring_pos(c.state.pos_long).clamp(0.0, self.road)).collect()
    }

    fn road_length(&self) -> f64 {
        self.road
    }

    /// Vehicles near the seam of a ring appear twice, once shifted by the
    /// road length, so overlaps across the seam are caught.
    fn footprints(&self) -> Vec<(usize, Obb)> {
        let reach = 2.0 * self.cfg.footprint.bounding_radius();
        let mut out = Vec::with_capacity(self.cars.len());
        for c in self.cars.values() {
            let x = self.ring_pos(c.state.pos_long);
            let mut push = |x: f64| {
                out.push((c.id, Obb::new(Point2::new(x, c.state.pos_lat), c.state.yaw.to_radians(), &self.cfg.footprint)))
            };
            push(x);
            if self.h().ring && x > self.road - reach {
                push(x - self.road);
            }
        }
        out
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
