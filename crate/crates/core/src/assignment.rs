//! Vehicle-to-slot cost matrix and an exact O(n³) Hungarian solver.

use crate::error::{Error, Result};
use crate::formation_geometry::TargetSlot;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CostWeights {
    /// Weight on squared longitudinal distance.
    pub w1: f64,
    /// Weight on squared lane-index difference.
    pub w2: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 10.0 }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w1 >= 0.0 && self.w2 >= 0.0 && (self.w1 > 0.0 || self.w2 > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidState(format!("invalid cost weights {self:?}")))
        }
    }
}

/// Square matrix, row = vehicle, column = slot.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::DimensionMismatch { vehicles: n, slots: row.len() });
            }
            if row.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidState("cost matrix entries must be finite".into()));
            }
            entries.extend_from_slice(row);
        }
        Ok(Self { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, vehicle: usize, slot: usize) -> f64 {
        self.entries[vehicle * self.n + slot]
    }

    /// Sum of entries along a permutation, accumulated in row order.
    pub fn cost_of(&self, slot_of: &[usize]) -> f64 {
        slot_of.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `slot_of[vehicle] = slot`.
    pub slot_of: Vec<usize>,
    pub total_cost: f64,
}

/// Vehicle position as (longitudinal coordinate, lane index).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehiclePos {
    pub pos_long: f64,
    pub lane: u32,
}

/// Weighted squared longitudinal distance plus weighted squared lane
/// difference. A slot's absolute position is `anchor - x_offset`: slots
/// trail the anchor in the driving direction.
pub fn build_cost_matrix(
    vehicles: &[VehiclePos],
    slots: &[TargetSlot],
    anchor: f64,
    weights: &CostWeights,
) -> Result<CostMatrix> {
    if vehicles.len() != slots.len() {
        return Err(Error::DimensionMismatch { vehicles: vehicles.len(), slots: slots.len() });
    }
    let rows: Vec<Vec<f64>> = vehicles
        .iter()
        .map(|v| {
            slots
                .iter()
                .map(|s| {
                    let dx = anchor - s.x_offset - v.pos_long;
                    let dl = s.lane_id as f64 - v.lane as f64;
                    weights.w1 * dx * dx + weights.w2 * dl * dl
                })
                .collect()
        })
        .collect();
    CostMatrix::from_rows(&rows)
}

/// Minimum-cost perfect assignment (Kuhn–Munkres with row/column potentials).
pub fn solve_assignment(costs: &CostMatrix) -> Assignment {
    let n = costs.n();
    if n == 0 {
        return Assignment { slot_of: Vec::new(), total_cost: 0.0 };
    }
    // 1-based working arrays; index 0 is the sentinel column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = costs.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut slot_of = vec![0usize; n];
    for j in 1..=n {
        slot_of[row_of_col[j] - 1] = j - 1;
    }
    let total_cost = costs.cost_of(&slot_of);
    Assignment { slot_of, total_cost }
}
