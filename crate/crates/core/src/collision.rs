//! Oriented-rectangle overlap tests for vehicle footprints.

use crate::vehicle_dynamics::Point2;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
}

impl Default for Footprint {
    fn default() -> Self {
        Self { length: 4.5, width: 1.8 }
    }
}

impl Footprint {
    /// Radius of the circumscribed circle, for cheap rejection.
    pub fn bounding_radius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }
}

/// Rectangle centred at `center`, long axis along `heading` (rad).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    pub center: Point2,
    pub heading: f64,
    pub half_len: f64,
    pub half_wid: f64,
}

impl Obb {
    pub fn new(center: Point2, heading: f64, fp: &Footprint) -> Self {
        Self { center, heading, half_len: 0.5 * fp.length, half_wid: 0.5 * fp.width }
    }

    fn axes(&self) -> [(f64, f64); 2] {
        let (s, c) = self.heading.sin_cos();
        [(c, s), (-s, c)]
    }

    fn project_radius(&self, axis: (f64, f64)) -> f64 {
        let [u, v] = self.axes();
        self.half_len * (u.0 * axis.0 + u.1 * axis.1).abs() + self.half_wid * (v.0 * axis.0 + v.1 * axis.1).abs()
    }

    /// Separating-axis test; touching edges do not count as overlap.
    pub fn overlaps(&self, other: &Obb) -> bool {
        let d = (other.center.x - self.center.x, other.center.y - self.center.y);
        let [a0, a1] = self.axes();
        let [b0, b1] = other.axes();
        [a0, a1, b0, b1].into_iter().all(|ax| {
            let dist = (d.0 * ax.0 + d.1 * ax.1).abs();
            dist < self.project_radius(ax) + other.project_radius(ax)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(x: f64, y: f64, h_deg: f64) -> Obb {
        Obb::new(Point2::new(x, y), h_deg.to_radians(), &Footprint::default())
    }

    #[test]
    fn same_lane_spacing() {
        assert!(!at(0.0, 0.0, 0.0).overlaps(&at(20.0, 0.0, 0.0)));
        assert!(!at(0.0, 0.0, 0.0).overlaps(&at(4.5, 0.0, 0.0)));
        assert!(at(0.0, 0.0, 0.0).overlaps(&at(4.4, 0.0, 0.0)));
    }

    #[test]
    fn adjacent_lanes_clear() {
        assert!(!at(0.0, 0.0, 0.0).overlaps(&at(0.0, 4.0, 0.0)));
        assert!(at(0.0, 0.0, 0.0).overlaps(&at(0.0, 1.7, 0.0)));
    }

    #[test]
    fn rotated_corner_cases() {
        // crossing at right angles through the same point
        assert!(at(0.0, 0.0, 0.0).overlaps(&at(0.0, 0.0, 90.0)));
        assert!(!at(0.0, 0.0, 0.0).overlaps(&at(0.0, 3.2, 90.0)));
        // diagonal box just off a corner: separated only along its own axis
        assert!(!at(0.0, 0.0, 0.0).overlaps(&at(3.9, 2.6, 45.0)));
        assert!(at(0.0, 0.0, 0.0).overlaps(&at(3.0, 1.5, 45.0)));
    }
}
