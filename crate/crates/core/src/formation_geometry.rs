//! Interlaced multi-lane formation slots.
//!
//! A formation is cut into layers holding at most one slot per lane. Each
//! layer is split into two sublayers: odd lanes first, even lanes one slot
//! gap further back. Consecutive sublayers are always exactly one slot gap
//! apart, so vehicles in adjacent lanes never sit side by side.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormationSpec {
    pub n_lanes: u32,
    /// Longitudinal distance between adjacent sublayers (m).
    pub slot_gap: f64,
}

impl FormationSpec {
    pub fn new(n_lanes: u32, slot_gap: f64) -> Self {
        assert!(n_lanes >= 1, "a formation needs at least one lane");
        assert!(slot_gap > 0.0 && slot_gap.is_finite(), "slot gap must be positive");
        Self { n_lanes, slot_gap }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSlot {
    /// 1-based slot index.
    pub index: usize,
    /// Distance behind the most forward slot (m), always ≥ 0.
    pub x_offset: f64,
    pub lane_id: u32,
    pub layer: u32,
    /// 1 for the odd-lane sublayer, 2 for the even-lane sublayer.
    pub sublayer: u8,
}

/// Closed-form position of the `i`-th slot (1-based).
///
/// With `h = ceil(N_l / 2)` odd lanes per layer and the in-layer index
/// `j = (i - 1) mod N_l + 1`, the first `h` slots of a layer take the odd
/// lanes of sublayer 1 and the rest the even lanes of sublayer 2. A single
/// lane has no even sublayer and becomes a column spaced one slot gap apart.
pub fn slot_coordinates(i: usize, spec: &FormationSpec) -> TargetSlot {
    assert!(i >= 1, "slot indices are 1-based");
    let n_l = spec.n_lanes as usize;
    if n_l == 1 {
        return TargetSlot {
            index: i,
            x_offset: (i - 1) as f64 * spec.slot_gap,
            lane_id: 1,
            layer: i as u32,
            sublayer: 1,
        };
    }
    let h = n_l.div_ceil(2);
    let layer = i.div_ceil(n_l);
    let j = (i - 1) % n_l + 1;
    let (lane, sublayer, steps) = if j <= h {
        (2 * j - 1, 1u8, 2 * layer - 2)
    } else {
        (2 * (j - h), 2u8, 2 * layer - 1)
    };
    TargetSlot {
        index: i,
        x_offset: steps as f64 * spec.slot_gap,
        lane_id: lane as u32,
        layer: layer as u32,
        sublayer,
    }
}

/// Slots `1..=n`, in index order.
pub fn generate_targets(n: usize, spec: &FormationSpec) -> Vec<TargetSlot> {
    (1..=n).map(|i| slot_coordinates(i, spec)).collect()
}

/// Longitudinal extent of an `n`-slot formation (offset of its rearmost slot).
pub fn formation_extent(n: usize, spec: &FormationSpec) -> f64 {
    generate_targets(n, spec).iter().map(|s| s.x_offset).fold(0.0, f64::max)
}
