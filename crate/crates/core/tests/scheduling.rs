mod common;

use formation_core::assignment::CostWeights;
use formation_core::baselines::*;
use formation_core::formation_geometry::{generate_targets, FormationSpec};
use formation_core::intersection::*;
use formation_core::regrouping::*;
use formation_core::vehicle_dynamics::{Range, VehicleParams, VehicleState};
use proptest::prelude::*;

fn conflicts() -> ConflictRelation {
    compute_conflicts(&build_movements(&IntersectionGeometry::default()).unwrap())
}

/// Groups with strictly increasing distances and random movements and sizes.
fn group_set(max: usize) -> impl Strategy<Value = Vec<VehicleGroup>> {
    prop::collection::vec((1usize..=12, 1usize..=4, 1.0f64..40.0), 0..=max).prop_map(|spec| {
        let mut dist = 0.0;
        spec.into_iter()
            .enumerate()
            .map(|(k, (mv, size, step))| {
                dist += step;
                VehicleGroup {
                    group_id: k + 1,
                    movement_id: mv,
                    member_ids: (0..size).map(|m| 100 * (k + 1) + m).collect(),
                    member_offsets: (0..size).map(|m| 9.0 * m as f64).collect(),
                    lead_dist: dist,
                }
            })
            .collect()
    })
}

#[test]
fn conflict_relation_shape() {
    let movements = build_movements(&IntersectionGeometry::default()).unwrap();
    let c = compute_conflicts(&movements);
    for a in &movements {
        assert!(!c.conflicts(a.id, a.id));
        for b in &movements {
            assert_eq!(c.conflicts(a.id, b.id), c.conflicts(b.id, a.id));
            if a.id != b.id && a.approach_leg == b.approach_leg {
                assert!(!c.conflicts(a.id, b.id), "same-leg pair {} {}", a.id, b.id);
            }
            if a.turn == Turn::Left && b.turn == Turn::Left && a.approach_leg.opposite() == b.approach_leg {
                assert!(!c.conflicts(a.id, b.id), "opposite lefts {} {}", a.id, b.id);
            }
        }
    }
}

#[test]
fn reference_fixture_layers() {
    let c = conflicts();
    let groups: Vec<VehicleGroup> = common::REFERENCE_MOVEMENTS
        .iter()
        .enumerate()
        .map(|(k, &m)| common::singleton(k + 1, m, 40.0 + 25.0 * k as f64))
        .collect();
    let t = build_spanning_tree(&order_groups(groups), &c);
    assert_eq!(t.layer_sets[0], vec![1, 2, 5, 10]);
    assert_eq!(t.layer_sets[1], vec![3, 4, 8]);
}

proptest! {
    #[test]
    fn tree_layers_match_longest_chain(groups in group_set(12)) {
        let c = conflicts();
        let ordered = order_groups(groups);
        let tree = build_spanning_tree(&ordered, &c);
        prop_assert_eq!(&tree.tree_layer, &common::longest_chain_layers(&ordered, &c));
        for set in &tree.layer_sets {
            for &a in set {
                for &b in set {
                    prop_assert!(a == b || !c.groups_conflict(ordered[a - 1].movement_id, ordered[b - 1].movement_id));
                }
            }
        }
        for (k, &p) in tree.parent.iter().enumerate() {
            if p > 0 {
                prop_assert!(p < k + 1);
                prop_assert_eq!(tree.tree_layer[p - 1] + 1, tree.tree_layer[k]);
            } else {
                prop_assert_eq!(tree.tree_layer[k], 1);
            }
        }
        prop_assert_eq!(build_spanning_tree(&ordered, &c), tree);
    }

    #[test]
    fn later_layers_trail_by_gap(groups in group_set(12), leader in -50.0f64..50.0) {
        let c = conflicts();
        let z = ZoneConfig::default();
        let ordered = order_groups(groups);
        let tree = build_spanning_tree(&ordered, &c);
        let refs = reference_positions(&tree, &ordered, &z, leader);
        let lead_ref = |k: usize| refs.iter().find(|r| r.ordinal == k && r.vehicle_id == ordered[k - 1].member_ids[0]).unwrap().ref_dist;
        for m in 1..tree.depth() {
            for &j in &tree.layer_sets[m - 1] {
                let tail = lead_ref(j) + ordered[j - 1].extent();
                for &k in &tree.layer_sets[m] {
                    prop_assert!(lead_ref(k) >= tail + z.d_t - 1e-9);
                }
            }
        }
        prop_assert_eq!(reference_positions(&tree, &ordered, &z, leader), refs);
    }

    /// Merging runs of consecutive same-movement vehicles never deepens the tree.
    #[test]
    fn grouping_never_deepens(movements in prop::collection::vec(1usize..=12, 0..30)) {
        let c = conflicts();
        let singles: Vec<VehicleGroup> = movements.iter().enumerate().map(|(k, &m)| common::singleton(k + 1, m, 10.0 * (k + 1) as f64)).collect();
        let mut grouped: Vec<VehicleGroup> = Vec::new();
        for s in &singles {
            match grouped.last_mut() {
                Some(g) if g.movement_id == s.movement_id => {
                    g.member_ids.push(s.member_ids[0]);
                    g.member_offsets.push(s.lead_dist - g.lead_dist);
                }
                _ => grouped.push(s.clone()),
            }
        }
        let d_single = build_spanning_tree(&order_groups(singles), &c).depth();
        let d_grouped = build_spanning_tree(&order_groups(grouped), &c).depth();
        prop_assert!(d_grouped <= d_single);
    }

    #[test]
    fn single_vehicle_vp_is_a_valid_tree(vs in prop::collection::vec((1usize..=12, 0.0f64..300.0), 0..20)) {
        let c = conflicts();
        let vehicles: Vec<PlatoonVehicle> = vs.iter().enumerate().map(|(k, &(m, d))| PlatoonVehicle { vehicle_id: k, movement_id: m, dist: d }).collect();
        let (ordered, tree) = single_vehicle_vp(&vehicles, &c);
        prop_assert_eq!(ordered.len(), vehicles.len());
        prop_assert!(ordered.iter().all(|g| g.member_ids.len() == 1));
        prop_assert_eq!(&tree.tree_layer, &common::longest_chain_layers(&ordered, &c));
    }

    #[test]
    fn fcfs_never_overlaps(reqs in prop::collection::vec((1usize..=12, 0.0f64..5.0, 1.0f64..6.0), 1..25), buffer in 0.0f64..2.0) {
        let c = conflicts();
        let mut t = 0.0;
        let queue: Vec<ReservationRequest> = reqs
            .iter()
            .enumerate()
            .map(|(k, &(m, gap, transit))| {
                t += gap;
                ReservationRequest { vehicle_id: k, movement_id: m, arrival: t, transit }
            })
            .collect();
        let res = fcfs_reserve(&queue, &c, buffer);
        for (r, q) in res.iter().zip(&queue) {
            prop_assert!(r.entry >= q.arrival);
            prop_assert!((r.exit - r.entry - q.transit).abs() < 1e-12);
        }
        for (i, a) in res.iter().enumerate() {
            for b in &res[i + 1..] {
                if c.groups_conflict(a.movement_id, b.movement_id) {
                    let apart = b.entry >= a.exit + buffer - 1e-9 || a.entry >= b.exit + buffer - 1e-9;
                    prop_assert!(apart, "{a:?} {b:?}");
                }
            }
        }
    }
}

fn members_of(movements: &[usize], gap: f64, n_lanes: u32) -> Vec<Member> {
    let slots = generate_targets(movements.len(), &FormationSpec::new(n_lanes, gap));
    slots
        .iter()
        .zip(movements)
        .enumerate()
        .map(|(k, (s, &mv))| Member { vehicle_id: k + 1, movement_id: mv, pos_long: 1000.0 - s.x_offset, lane: s.lane_id, slot_offset: s.x_offset })
        .collect()
}

fn phase_inputs() -> impl Strategy<Value = PhaseInputs> {
    (0u8..3, any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(z, a, b, c)| PhaseInputs {
        lead_zone: [Zone::Approaching, Zone::Adjusting, Zone::Coordinating][z as usize],
        division_done: a,
        lane_change_done: b,
        tightened: c,
    })
}

proptest! {
    #[test]
    fn phases_never_regress(start in 0u8..3, inputs in prop::collection::vec(phase_inputs(), 1..40)) {
        let mut p = FormationPhase::initial([Zone::Approaching, Zone::Adjusting, Zone::Coordinating][start as usize]);
        for inp in &inputs {
            let q = p.next(inp);
            prop_assert!(q >= p);
            p = q;
        }
    }

    /// Division, lane changes and tightening never let a same-movement
    /// vehicle overtake one that started ahead of it; bands stay disjoint
    /// and every vehicle ends on a permitted lane.
    #[test]
    fn regrouping_preserves_order(movements in prop::collection::vec(1usize..=3, 1..16), two_lanes in any::<bool>()) {
        let gap = 15.0;
        let members = members_of(&movements, gap, 3);
        let plan = split_by_movement(&members, &FormationSpec::new(3, gap));
        for w in plan.subformations.windows(2) {
            prop_assert!(w[1].band_offset >= w[0].band_offset + w[0].extent() + gap - 1e-9);
        }
        let params = VehicleParams { speed_range: Range::new(0.0, 20.0), ..Default::default() };
        let weights = CostWeights::default();
        let ctx = ManeuverContext { params: &params, lane_width: 4.0, long_span: 30.0, max_span: 200.0, weights: &weights };
        let pos_of = |id: usize| members.iter().find(|m| m.vehicle_id == id).unwrap().pos_long;
        for sub in &plan.subformations {
            let lane = sub.movement_id as u32;
            let mut permitted = if two_lanes { vec![lane, lane % 3 + 1] } else { vec![lane] };
            permitted.sort_unstable();
            let states: Vec<VehicleState> = sub.member_ids.iter().zip(&sub.lanes).map(|(&id, &l)| VehicleState::on_lane(pos_of(id), l, 10.0, 4.0)).collect();
            let (changed, _) = plan_lane_changes(sub, &permitted, &states, &ctx).unwrap();
            prop_assert!(changed.lanes.iter().all(|l| permitted.contains(l)));
            let tight = tighten(&changed, 9.0);
            for stage in [sub, &changed, &tight] {
                for a in 0..stage.len() {
                    for b in 0..stage.len() {
                        let (ia, ib) = (stage.member_ids[a], stage.member_ids[b]);
                        if pos_of(ia) > pos_of(ib) {
                            prop_assert!(stage.offsets[a] <= stage.offsets[b], "{ia} ahead of {ib} but slotted behind");
                        }
                    }
                }
            }
        }
    }
}
