//! Reference intersection policies: first-come-first-served reservations
//! and the virtual platoon with one vehicle per node. Also the random-lane
//! choice used as the highway comparison.

use rand::Rng;

use crate::collision::Footprint;
use crate::intersection::{build_spanning_tree, order_groups, ConflictRelation, Movement, SpanningTree, VehicleGroup};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReservationRequest {
    pub vehicle_id: usize,
    pub movement_id: usize,
    /// Earliest feasible stop-line arrival (s).
    pub arrival: f64,
    /// Time the vehicle occupies the box (s).
    pub transit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reservation {
    pub vehicle_id: usize,
    pub movement_id: usize,
    pub entry: f64,
    pub exit: f64,
}

/// Box occupancy time at the desired speed: path length plus one vehicle
/// length.
pub fn box_transit_time(movement: &Movement, fp: &Footprint, v0_des: f64) -> f64 {
    (movement.path_length() + fp.length) / v0_des
}

/// Granted reservations, kept in grant order.
#[derive(Debug, Clone, Default)]
pub struct ReservationBook {
    granted: Vec<Reservation>,
    /// Minimum idle time between conflicting reservations (s).
    pub buffer: f64,
}

impl ReservationBook {
    pub fn new(buffer: f64) -> Self {
        Self { granted: Vec::new(), buffer }
    }

    pub fn reservations(&self) -> &[Reservation] {
        &self.granted
    }

    pub fn get(&self, vehicle_id: usize) -> Option<&Reservation> {
        self.granted.iter().find(|r| r.vehicle_id == vehicle_id)
    }

    /// Earliest entry at or after the request's arrival that keeps `buffer`
    /// clear of every conflicting reservation.
    pub fn reserve(&mut self, req: &ReservationRequest, conflicts: &ConflictRelation) -> Reservation {
        let mut entry = req.arrival;
        loop {
            let blocking = self
                .granted
                .iter()
                .filter(|r| conflicts.groups_conflict(r.movement_id, req.movement_id))
                .filter(|r| entry < r.exit + self.buffer && r.entry < entry + req.transit + self.buffer)
                .map(|r| r.exit + self.buffer)
                .fold(f64::NEG_INFINITY, f64::max);
            if blocking == f64::NEG_INFINITY {
                break;
            }
            entry = blocking;
        }
        let r = Reservation { vehicle_id: req.vehicle_id, movement_id: req.movement_id, entry, exit: entry + req.transit };
        self.granted.push(r);
        r
    }

    /// Forget reservations that ended before `t`.
    pub fn release_before(&mut self, t: f64) {
        let buffer = self.buffer;
        self.granted.retain(|r| r.exit + buffer >= t);
    }

    pub fn cancel(&mut self, vehicle_id: usize) {
        self.granted.retain(|r| r.vehicle_id != vehicle_id);
    }
}

/// Serve requests one by one in queue order.
pub fn fcfs_reserve(queue: &[ReservationRequest], conflicts: &ConflictRelation, buffer: f64) -> Vec<Reservation> {
    let mut book = ReservationBook::new(buffer);
    queue.iter().map(|q| book.reserve(q, conflicts)).collect()
}

/// A coordinating-zone vehicle as seen by the single-vehicle platoon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlatoonVehicle {
    pub vehicle_id: usize,
    pub movement_id: usize,
    pub dist: f64,
}

/// Every vehicle is its own group.
pub fn singleton_groups(vehicles: &[PlatoonVehicle]) -> Vec<VehicleGroup> {
    vehicles
        .iter()
        .map(|v| VehicleGroup {
            group_id: v.vehicle_id,
            movement_id: v.movement_id,
            member_ids: vec![v.vehicle_id],
            member_offsets: vec![0.0],
            lead_dist: v.dist,
        })
        .collect()
}

pub fn single_vehicle_vp(vehicles: &[PlatoonVehicle], conflicts: &ConflictRelation) -> (Vec<VehicleGroup>, SpanningTree) {
    let ordered = order_groups(singleton_groups(vehicles));
    let tree = build_spanning_tree(&ordered, conflicts);
    (ordered, tree)
}

/// Uniform lane choice in `1..=n_lanes`.
pub fn random_lane<R: Rng + ?Sized>(rng: &mut R, n_lanes: u32) -> u32 {
    rng.gen_range(1..=n_lanes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intersection::{build_movements, compute_conflicts, IntersectionGeometry};
    use rand::SeedableRng;

    fn conflicts() -> ConflictRelation {
        compute_conflicts(&build_movements(&IntersectionGeometry::default()).unwrap())
    }

    fn req(id: usize, mv: usize, arrival: f64, transit: f64) -> ReservationRequest {
        ReservationRequest { vehicle_id: id, movement_id: mv, arrival, transit }
    }

    #[test]
    fn lone_vehicle_keeps_arrival() {
        let r = fcfs_reserve(&[req(1, 2, 7.5, 3.0)], &conflicts(), 0.0);
        assert_eq!(r[0].entry, 7.5);
    }

    #[test]
    fn conflicting_pair_delayed() {
        let c = conflicts();
        assert!(c.conflicts(2, 5));
        let r = fcfs_reserve(&[req(1, 2, 0.0, 3.0), req(2, 5, 1.0, 3.0)], &c, 0.0);
        assert_eq!(r[1].entry - 1.0, 2.0);
    }

    #[test]
    fn non_conflicting_pair_free() {
        let c = conflicts();
        assert!(!c.conflicts(1, 7));
        let r = fcfs_reserve(&[req(1, 1, 0.0, 3.0), req(2, 7, 1.0, 3.0)], &c, 0.5);
        assert_eq!((r[0].entry, r[1].entry), (0.0, 1.0));
    }

    #[test]
    fn buffer_and_release() {
        let c = conflicts();
        let mut book = ReservationBook::new(1.0);
        book.reserve(&req(1, 2, 0.0, 3.0), &c);
        let r = book.reserve(&req(2, 5, 0.0, 3.0), &c);
        assert_eq!(r.entry, 4.0);
        book.release_before(10.0);
        assert!(book.reservations().is_empty());
    }

    #[test]
    fn singleton_vp() {
        let c = conflicts();
        let (o, t) = single_vehicle_vp(&[PlatoonVehicle { vehicle_id: 9, movement_id: 4, dist: 80.0 }], &c);
        assert_eq!(o.len(), 1);
        assert_eq!(t.tree_layer, vec![1]);
    }

    #[test]
    fn random_lane_in_range() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut seen = [false; 4];
        for _ in 0..200 {
            let l = random_lane(&mut rng, 4);
            assert!((1..=4).contains(&l));
            seen[l as usize - 1] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
