//! Per-tick series, heatmap snapshots and run totals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::World;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickRow {
    pub t: f64,
    pub remaining: usize,
    pub spawned: usize,
    pub exited: usize,
    pub mean_speed: f64,
    pub mean_abs_accel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatCell {
    pub t: f64,
    pub bin_start: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub ticks: usize,
    pub spawned: usize,
    pub exited: usize,
    pub remaining_final: usize,
    pub remaining_mean: f64,
    /// Mean speed over all vehicle-ticks (m/s).
    pub mean_speed: f64,
    /// Mean |acceleration| over all vehicle-ticks (m/s²).
    pub mean_abs_accel: f64,
    /// Mean over vehicles of each vehicle's speed standard deviation (m/s).
    pub mean_speed_sd: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Vehicles that left the world per hour of simulated time.
    pub throughput_vph: f64,
    pub safety_violations: usize,
    /// Ticks at which spawned != remaining + exited.
    pub conservation_violations: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    sum: f64,
    sumsq: f64,
}

#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    pub series: Vec<TickRow>,
    pub heatmap: Vec<HeatCell>,
    pub summary: RunSummary,
    snapshot_interval: f64,
    bin_width: f64,
    next_snapshot: f64,
    speed_sum: f64,
    accel_sum: f64,
    samples: usize,
    per_vehicle: BTreeMap<usize, Moments>,
}

impl MetricsAccumulator {
    pub fn new(snapshot_interval: f64, bin_width: f64) -> Self {
        Self {
            series: Vec::new(),
            heatmap: Vec::new(),
            summary: RunSummary { min_speed: f64::INFINITY, max_speed: f64::NEG_INFINITY, ..Default::default() },
            snapshot_interval,
            bin_width,
            next_snapshot: 0.0,
            speed_sum: 0.0,
            accel_sum: 0.0,
            samples: 0,
            per_vehicle: BTreeMap::new(),
        }
    }

    /// Append one tick of observations.
    pub fn record<W: World>(&mut self, world: &W) {
        let t = world.time();
        let kin = world.kinematics();
        let ledger = world.ledger();
        let n = kin.len();
        if ledger.spawned != n + ledger.exited {
            self.summary.conservation_violations += 1;
        }
        let (mut vs, mut acc) = (0.0, 0.0);
        for &(id, v, a) in &kin {
            vs += v;
            acc += a.abs();
            self.summary.min_speed = self.summary.min_speed.min(v);
            self.summary.max_speed = self.summary.max_speed.max(v);
            let m = self.per_vehicle.entry(id).or_default();
            m.n += 1;
            m.sum += v;
            m.sumsq += v * v;
        }
        self.speed_sum += vs;
        self.accel_sum += acc;
        self.samples += n;
        let mean = |x: f64| if n > 0 { x / n as f64 } else { 0.0 };
        self.series.push(TickRow {
            t,
            remaining: n,
            spawned: ledger.spawned,
            exited: ledger.exited,
            mean_speed: mean(vs),
            mean_abs_accel: mean(acc),
        });

        if t + 1e-9 >= self.next_snapshot {
            let n_bins = (world.road_length() / self.bin_width).ceil().max(1.0) as usize;
            let mut counts = vec![0usize; n_bins];
            for x in world.bin_coordinates() {
                let b = ((x / self.bin_width).floor().max(0.0) as usize).min(n_bins - 1);
                counts[b] += 1;
            }
            for (b, c) in counts.into_iter().enumerate() {
                self.heatmap.push(HeatCell { t, bin_start: b as f64 * self.bin_width, count: c });
            }
            self.next_snapshot += self.snapshot_interval;
        }
    }

    /// Close the run: totals and collision count.
    pub fn finish<W: World>(&mut self, world: &W) {
        let s = &mut self.summary;
        let ledger = world.ledger();
        s.ticks = self.series.len().saturating_sub(1);
        s.spawned = ledger.spawned;
        s.exited = ledger.exited;
        s.remaining_final = self.series.last().map_or(0, |r| r.remaining);
        s.remaining_mean = if self.series.is_empty() {
            0.0
        } else {
            self.series.iter().map(|r| r.remaining as f64).sum::<f64>() / self.series.len() as f64
        };
        if self.samples > 0 {
            s.mean_speed = self.speed_sum / self.samples as f64;
            s.mean_abs_accel = self.accel_sum / self.samples as f64;
        } else {
            s.min_speed = 0.0;
            s.max_speed = 0.0;
        }
        let sds: Vec<f64> = self
            .per_vehicle
            .values()
            .filter(|m| m.n > 1)
            .map(|m| {
                let mean = m.sum / m.n as f64;
                (m.sumsq / m.n as f64 - mean * mean).max(0.0).sqrt()
            })
            .collect();
        s.mean_speed_sd = if sds.is_empty() { 0.0 } else { sds.iter().sum::<f64>() / sds.len() as f64 };
        let t = world.time();
        s.throughput_vph = if t > 0.0 { ledger.exited as f64 * 3600.0 / t } else { 0.0 };
        s.safety_violations = world.collisions().len();
    }

    /// `t,remaining,mean_speed,mean_abs_accel`
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("t,remaining,mean_speed,mean_abs_accel\n");
        for r in &self.series {
            let _ = writeln!(out, "{:.2},{},{:.4},{:.4}", r.t, r.remaining, r.mean_speed, r.mean_abs_accel);
        }
        out
    }

    /// `t,bin_start_m,count`
    pub fn heatmap_csv(&self) -> String {
        let mut out = String::from("t,bin_start_m,count\n");
        for c in &self.heatmap {
            let _ = writeln!(out, "{:.2},{:.0},{}", c.t, c.bin_start, c.count);
        }
        out
    }
}
