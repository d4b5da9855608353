//! Kinematic bicycle model, longitudinal tracking law, cubic Bézier lane
//! changes and preview (pure-pursuit) steering.
//!
//! Everything here works in a road-aligned frame: `long` grows in the
//! driving direction, `lat` grows to the left, and lane 1 is the leftmost
//! lane with its centreline at `lat = 0`. Angles crossing the public API are
//! in degrees.

use crate::error::{Error, Result};

/// Closed interval `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleParams {
    /// Wheelbase (m).
    pub wheelbase: f64,
    /// Front-wheel steering range (deg).
    pub steer_range: Range,
    /// Speed range (m/s).
    pub speed_range: Range,
    /// Acceleration range (m/s²).
    pub accel_range: Range,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.8,
            steer_range: Range::new(-30.0, 30.0),
            speed_range: Range::new(10.0, 30.0),
            accel_range: Range::new(-6.0, 3.0),
        }
    }
}

impl VehicleParams {
    /// Yaw is kept in the half-open interval `[-180, 180)` degrees.
    pub const YAW_RANGE: (f64, f64) = (-180.0, 180.0);

    pub fn validate(&self) -> Result<()> {
        let ok = self.wheelbase.is_finite()
            && self.wheelbase > 0.0
            && self.steer_range.is_valid()
            && self.speed_range.is_valid()
            && self.accel_range.is_valid();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidState(format!("invalid vehicle parameters {self:?}")))
        }
    }
}

/// Lateral centreline of a 1-based lane index.
pub fn lane_center(lane: u32, lane_width: f64) -> f64 {
    -(lane as f64 - 1.0) * lane_width
}

/// Lane index whose band contains `lat`; never below 1.
pub fn lane_of(lat: f64, lane_width: f64) -> u32 {
    let idx = (-lat / lane_width).round();
    if idx < 0.0 {
        1
    } else {
        idx as u32 + 1
    }
}

pub fn wrap_deg(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can return 360 - eps rounding to exactly 180
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub pos_long: f64,
    pub pos_lat: f64,
    /// Heading relative to the road axis (deg).
    pub yaw: f64,
    pub speed: f64,
    pub lane_id: u32,
    pub last_accel: f64,
    /// Last applied steering angle (deg). Kept for observability only.
    pub last_steer: f64,
}

impl VehicleState {
    /// Lane-aligned state centred on `lane`.
    pub fn on_lane(pos_long: f64, lane: u32, speed: f64, lane_width: f64) -> Self {
        Self {
            pos_long,
            pos_lat: lane_center(lane, lane_width),
            yaw: 0.0,
            speed,
            lane_id: lane,
            last_accel: 0.0,
            last_steer: 0.0,
        }
    }

    fn is_finite(&self) -> bool {
        self.pos_long.is_finite()
            && self.pos_lat.is_finite()
            && self.yaw.is_finite()
            && self.speed.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput {
    pub accel: f64,
    /// Front-wheel steering angle (deg).
    pub steer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ControllerGains {
    /// Position gain (1/s²).
    pub k_p: f64,
    /// Speed gain (1/s).
    pub k_v: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self { k_p: 0.2, k_v: 0.8 }
    }
}

/// One forward-Euler step of the kinematic bicycle model.
///
/// Inputs are clamped to the parameter ranges before integration; speed is
/// clamped again afterwards and the lane index is recomputed from the
/// lateral position.
pub fn step_kinematics(
    state: &VehicleState,
    input: ControlInput,
    dt: f64,
    params: &VehicleParams,
    lane_width: f64,
) -> Result<VehicleState> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidState(format!("time step must be positive, got {dt}")));
    }
    if !state.is_finite() || !input.accel.is_finite() || !input.steer.is_finite() {
        return Err(Error::InvalidState("non-finite vehicle state or input".into()));
    }
    let accel = params.accel_range.clamp(input.accel);
    let steer = params.steer_range.clamp(input.steer);
    let yaw = state.yaw.to_radians();
    let v = state.speed;

    let pos_long = state.pos_long + v * yaw.cos() * dt;
    let pos_lat = state.pos_lat + v * yaw.sin() * dt;
    let yaw_rate = steer.to_radians().tan() * v / params.wheelbase;
    let yaw = wrap_deg((yaw + yaw_rate * dt).to_degrees());
    let speed = params.speed_range.clamp(v + accel * dt);

    Ok(VehicleState {
        pos_long,
        pos_lat,
        yaw,
        speed,
        lane_id: lane_of(pos_lat, lane_width),
        last_accel: accel,
        last_steer: steer,
    })
}

/// Longitudinal tracking law `k_p (x_ref - x) + k_v (v_ref - v)`, clamped to
/// the acceleration range.
pub fn longitudinal_accel(
    state: &VehicleState,
    ref_pos: f64,
    ref_speed: f64,
    gains: &ControllerGains,
    params: &VehicleParams,
) -> Result<f64> {
    if !(ref_pos.is_finite() && ref_speed.is_finite() && state.is_finite()) {
        return Err(Error::InvalidState("non-finite tracking reference".into()));
    }
    let a = gains.k_p * (ref_pos - state.pos_long) + gains.k_v * (ref_speed - state.speed);
    Ok(params.accel_range.clamp(a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, o: &Point2) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

const ARC_SAMPLES: usize = 128;

/// Cubic Bézier lane-change path in the road frame (`x` = long, `y` = lat).
#[derive(Debug, Clone, PartialEq)]
pub struct LaneChangeTrajectory {
    pub control_points: [Point2; 4],
    /// Planned duration at the speed used for planning (s).
    pub duration: f64,
    // cumulative arc length at t = i / ARC_SAMPLES
    arc: Vec<f64>,
}

impl LaneChangeTrajectory {
    pub fn new(control_points: [Point2; 4], duration: f64) -> Self {
        let mut traj = Self { control_points, duration, arc: Vec::with_capacity(ARC_SAMPLES + 1) };
        let mut acc = 0.0;
        let mut prev = traj.point(0.0);
        traj.arc.push(0.0);
        for i in 1..=ARC_SAMPLES {
            let p = traj.point(i as f64 / ARC_SAMPLES as f64);
            acc += p.dist(&prev);
            traj.arc.push(acc);
            prev = p;
        }
        traj
    }

    /// Straight lane-keeping segment.
    pub fn straight(start: Point2, span: f64, duration: f64) -> Self {
        let p = |f: f64| Point2::new(start.x + f * span, start.y);
        Self::new([p(0.0), p(1.0 / 3.0), p(2.0 / 3.0), p(1.0)], duration)
    }

    pub fn point(&self, t: f64) -> Point2 {
        let [p0, p1, p2, p3] = self.control_points;
        let u = 1.0 - t;
        let b0 = u * u * u;
        let b1 = 3.0 * u * u * t;
        let b2 = 3.0 * u * t * t;
        let b3 = t * t * t;
        Point2::new(
            b0 * p0.x + b1 * p1.x + b2 * p2.x + b3 * p3.x,
            b0 * p0.y + b1 * p1.y + b2 * p2.y + b3 * p3.y,
        )
    }

    fn derivative(&self, t: f64) -> Point2 {
        let [p0, p1, p2, p3] = self.control_points;
        let u = 1.0 - t;
        let a = 3.0 * u * u;
        let b = 6.0 * u * t;
        let c = 3.0 * t * t;
        Point2::new(
            a * (p1.x - p0.x) + b * (p2.x - p1.x) + c * (p3.x - p2.x),
            a * (p1.y - p0.y) + b * (p2.y - p1.y) + c * (p3.y - p2.y),
        )
    }

    fn second_derivative(&self, t: f64) -> Point2 {
        let [p0, p1, p2, p3] = self.control_points;
        let u = 1.0 - t;
        Point2::new(
            6.0 * u * (p2.x - 2.0 * p1.x + p0.x) + 6.0 * t * (p3.x - 2.0 * p2.x + p1.x),
            6.0 * u * (p2.y - 2.0 * p1.y + p0.y) + 6.0 * t * (p3.y - 2.0 * p2.y + p1.y),
        )
    }

    /// Point and tangent heading (deg) at `t ∈ [0, 1]`.
    pub fn sample(&self, t: f64) -> (Point2, f64) {
        let t = t.clamp(0.0, 1.0);
        let d = self.derivative(t);
        (self.point(t), d.y.atan2(d.x).to_degrees())
    }

    pub fn curvature(&self, t: f64) -> f64 {
        let d = self.derivative(t);
        let dd = self.second_derivative(t);
        let n = (d.x * d.x + d.y * d.y).powf(1.5);
        if n == 0.0 {
            0.0
        } else {
            (d.x * dd.y - d.y * dd.x) / n
        }
    }

    /// Largest |curvature| over a uniform sampling of the curve.
    pub fn max_abs_curvature(&self, samples: usize) -> f64 {
        (0..=samples)
            .map(|i| self.curvature(i as f64 / samples as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn length(&self) -> f64 {
        *self.arc.last().unwrap_or(&0.0)
    }

    pub fn start(&self) -> Point2 {
        self.control_points[0]
    }

    pub fn end(&self) -> Point2 {
        self.control_points[3]
    }

    fn t_at_arc(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let total = self.length();
        if s >= total {
            return 1.0;
        }
        let i = self.arc.partition_point(|&a| a < s).max(1);
        let (a0, a1) = (self.arc[i - 1], self.arc[i]);
        let f = if a1 > a0 { (s - a0) / (a1 - a0) } else { 0.0 };
        ((i - 1) as f64 + f) / ARC_SAMPLES as f64
    }

    /// Arc length of the sampled point nearest to `p`.
    fn project(&self, p: Point2) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..ARC_SAMPLES {
            let a = self.point(i as f64 / ARC_SAMPLES as f64);
            let b = self.point((i + 1) as f64 / ARC_SAMPLES as f64);
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len2 = dx * dx + dy * dy;
            let f = if len2 > 0.0 {
                (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = Point2::new(a.x + f * dx, a.y + f * dy);
            let d = q.dist(&p);
            if d < best.0 {
                let s = self.arc[i] + f * (self.arc[i + 1] - self.arc[i]);
                best = (d, s);
            }
        }
        best.1
    }

    /// Point at arc length `s`, continuing straight along the exit tangent
    /// past the end of the curve.
    pub fn point_at_arc(&self, s: f64) -> Point2 {
        let total = self.length();
        if s <= total {
            return self.point(self.t_at_arc(s));
        }
        let (end, heading) = self.sample(1.0);
        let h = heading.to_radians();
        Point2::new(end.x + (s - total) * h.cos(), end.y + (s - total) * h.sin())
    }
}

/// Plan a cubic Bézier lane change from `start` to the centreline of
/// `target_lane`.
///
/// The inner control points sit on the start and end centrelines at one and
/// two thirds of the span, so entry and exit tangents are lane-aligned. The
/// span is stretched in 25 % steps until the peak curvature is reachable
/// with the steering limit; spans beyond `max_span` are infeasible.
pub fn bezier_lane_change(
    start: Point2,
    target_lane: u32,
    lane_width: f64,
    long_span: f64,
    speed: f64,
    params: &VehicleParams,
    max_span: f64,
) -> Result<LaneChangeTrajectory> {
    if !(long_span.is_finite() && long_span > 0.0) {
        return Err(Error::InvalidState(format!("lane-change span must be positive, got {long_span}")));
    }
    let duration = |span: f64| if speed > 0.0 { span / speed } else { f64::INFINITY };
    let current = lane_of(start.y, lane_width);
    if current == target_lane {
        return Ok(LaneChangeTrajectory::straight(start, long_span, duration(long_span)));
    }
    let y1 = lane_center(target_lane, lane_width);
    let max_steer = params.steer_range.max.abs().min(params.steer_range.min.abs()).to_radians();
    let mut span = long_span;
    loop {
        let traj = LaneChangeTrajectory::new(
            [
                start,
                Point2::new(start.x + span / 3.0, start.y),
                Point2::new(start.x + 2.0 * span / 3.0, y1),
                Point2::new(start.x + span, y1),
            ],
            duration(span),
        );
        let kappa = traj.max_abs_curvature(256);
        if (params.wheelbase * kappa).atan() <= max_steer {
            return Ok(traj);
        }
        span *= 1.25;
        if span > max_span {
            return Err(Error::Infeasible(format!(
                "no lane change within {max_span} m satisfies the steering limit"
            )));
        }
    }
}

/// Pure-pursuit steering toward the trajectory point `preview_dist` ahead of
/// the vehicle's projection. Returns 0 once the vehicle is past the end.
pub fn preview_steering(
    state: &VehicleState,
    traj: &LaneChangeTrajectory,
    preview_dist: f64,
    params: &VehicleParams,
) -> Result<f64> {
    if !(preview_dist.is_finite() && preview_dist > 0.0) {
        return Err(Error::InvalidState(format!("preview distance must be positive, got {preview_dist}")));
    }
    if state.pos_long > traj.end().x {
        return Ok(0.0);
    }
    let here = Point2::new(state.pos_long, state.pos_lat);
    let s = traj.project(here);
    let target = traj.point_at_arc(s + preview_dist);
    let bearing = (target.y - here.y).atan2(target.x - here.x);
    let alpha = bearing - state.yaw.to_radians();
    let steer = (2.0 * params.wheelbase * alpha.sin() / preview_dist).atan().to_degrees();
    Ok(params.steer_range.clamp(steer))
}
