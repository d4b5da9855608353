//! Car following and the emergency braking clamp.

use std::ops::RangeInclusive;

use crate::collision::Footprint;
use crate::vehicle_dynamics::{lane_of, Range, VehicleState};

/// Bumper-to-bumper gap below which the follower must brake at full
/// strength so that it still stops `min_gap` behind a leader braking just
/// as hard. One tick of travel covers the reaction delay.
pub fn safe_gap(v: f64, v_lead: f64, brake: f64, min_gap: f64, dt: f64) -> f64 {
    min_gap + ((v * v - v_lead * v_lead) / (2.0 * brake)).max(0.0) + v * dt
}

/// Override `accel` with full braking when the gap is unsafe.
pub fn safety_clamp(accel: f64, gap: f64, v: f64, v_lead: f64, accel_range: &Range, dt: f64) -> f64 {
    if gap < safe_gap(v, v_lead, -accel_range.min, MIN_GAP, dt) {
        accel_range.min
    } else {
        accel
    }
}

pub const MIN_GAP: f64 = 2.0;

/// Lanes the footprint overlaps laterally, lowest index first.
pub fn occupied_lanes(st: &VehicleState, fp: &Footprint, lane_width: f64) -> RangeInclusive<u32> {
    let (sin, cos) = st.yaw.to_radians().sin_cos();
    let half = 0.5 * fp.width * cos.abs() + 0.5 * fp.length * sin.abs();
    lane_of(st.pos_lat + half, lane_width)..=lane_of(st.pos_lat - half, lane_width)
}

/// Leader-following acceleration: close the gap to `min_gap + headway·v`
/// and match the leader's speed.
pub fn follow_accel(gap: f64, v: f64, v_lead: f64, headway: f64, k_p: f64, k_v: f64) -> f64 {
    let desired = MIN_GAP + headway * v;
    k_p * (gap - desired) + k_v * (v_lead - v)
}
