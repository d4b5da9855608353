//! Independent oracles shared by the property tests and the acceptance run.
#![allow(dead_code)]

use formation_core::intersection::{ConflictRelation, VehicleGroup};

/// Slots laid out one by one: odd lanes left to right, then even lanes one
/// gap back, then the next layer. Returns (lane, x_offset, layer, sublayer).
pub fn constructive_slots(n: usize, n_lanes: u32, gap: f64) -> Vec<(u32, f64, u32, u8)> {
    let mut out = Vec::with_capacity(n);
    let odd: Vec<u32> = (1..=n_lanes).filter(|l| l % 2 == 1).collect();
    let even: Vec<u32> = (1..=n_lanes).filter(|l| l % 2 == 0).collect();
    let mut layer = 1u32;
    let mut row = 0.0;
    while out.len() < n {
        for (sub, lanes) in [(1u8, &odd), (2u8, &even)] {
            if lanes.is_empty() {
                continue;
            }
            for &lane in lanes.iter() {
                if out.len() < n {
                    out.push((lane, row * gap, layer, sub));
                }
            }
            row += 1.0;
        }
        layer += 1;
    }
    out
}

/// Minimum assignment cost by enumerating every permutation; sums in
/// vehicle order.
pub fn brute_force_min(costs: &[Vec<f64>]) -> f64 {
    fn rec(costs: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == costs.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..costs.len() {
            if !used[j] {
                used[j] = true;
                rec(costs, row + 1, used, acc + costs[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(costs, 0, &mut vec![false; costs.len()], 0.0, &mut best);
    if costs.is_empty() {
        0.0
    } else {
        best
    }
}

/// Layer of each ordinal as the node count of the longest conflicting chain
/// ending there, via an explicit DAG and topological relaxation.
pub fn longest_chain_layers(ordered: &[VehicleGroup], conflicts: &ConflictRelation) -> Vec<u32> {
    let n = ordered.len();
    let mut succ = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for u in 0..n {
        for v in u + 1..n {
            if conflicts.groups_conflict(ordered[u].movement_id, ordered[v].movement_id) {
                succ[u].push(v);
                indeg[v] += 1;
            }
        }
    }
    let mut len = vec![1u32; n];
    let mut queue: std::collections::VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    while let Some(u) = queue.pop_front() {
        for &v in &succ[u] {
            len[v] = len[v].max(len[u] + 1);
            indeg[v] -= 1;
            if indeg[v] == 0 {
                queue.push_back(v);
            }
        }
    }
    len
}

/// Ten groups in distance order whose movements give the reference passing
/// sequence {1,2,5,10}, {3,4,8}, ...
pub const REFERENCE_MOVEMENTS: [usize; 10] = [1, 7, 2, 8, 3, 5, 11, 3, 5, 9];

pub fn singleton(id: usize, movement: usize, dist: f64) -> VehicleGroup {
    VehicleGroup { group_id: id, movement_id: movement, member_ids: vec![id], member_offsets: vec![0.0], lead_dist: dist }
}
