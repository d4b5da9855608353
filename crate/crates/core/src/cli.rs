//! Batch front-end: single runs and parameter sweeps that write CSV and
//! TOML artifacts named by a content hash.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{to_toml, with_override};
use crate::sim::{run_scenario, MetricsAccumulator, Policy, RunSummary, ScenarioConfig};
use crate::{Error, Result};

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "FORMSIM_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config_path: PathBuf,
    pub seed: u64,
    pub policy: Policy,
    pub out_dir: PathBuf,
    pub run_id: String,
}

impl RunManifest {
    pub fn new(config_path: &Path, cfg: &ScenarioConfig, seed: u64, policy: Policy, out_dir: &Path) -> Self {
        Self {
            config_path: config_path.to_path_buf(),
            seed,
            policy,
            out_dir: out_dir.to_path_buf(),
            run_id: run_id(cfg, seed, policy),
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}_metrics.csv", self.run_id))
    }

    pub fn heatmap_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}_heatmap.csv", self.run_id))
    }

    pub fn summary_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}_summary.toml", self.run_id))
    }
}

/// First 16 hex digits of SHA-256 over the canonical config, seed and policy.
pub fn run_id(cfg: &ScenarioConfig, seed: u64, policy: Policy) -> String {
    let mut h = Sha256::new();
    h.update(to_toml(cfg).as_bytes());
    h.update(format!("\nseed={seed}\npolicy={policy}\n").as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    run: &'a RunManifest,
    summary: &'a RunSummary,
}

/// Simulate and write the three artifacts. Nothing is written if the run
/// fails. Collisions do not fail the run; they show up as
/// `safety_violations` in the summary.
pub fn run(config_path: &Path, cfg: &ScenarioConfig, seed: u64, policy: Policy, out_dir: &Path) -> Result<(RunManifest, RunSummary)> {
    let mut cfg = cfg.clone();
    cfg.rng_seed = seed;
    let manifest = RunManifest::new(config_path, &cfg, seed, policy, out_dir);
    let acc = run_scenario(&cfg, policy)?;
    write_artifacts(&manifest, &acc)?;
    Ok((manifest, acc.summary))
}

fn write_artifacts(m: &RunManifest, acc: &MetricsAccumulator) -> Result<()> {
    let summary = toml::to_string(&SummaryFile { run: m, summary: &acc.summary })
        .map_err(|e| Error::InvalidState(e.to_string()))?;
    fs::create_dir_all(&m.out_dir)?;
    let files = [
        (m.metrics_path(), acc.metrics_csv()),
        (m.heatmap_path(), acc.heatmap_csv()),
        (m.summary_path(), summary),
    ];
    // stage everything first so a failed write leaves no final-named file
    let mut staged = Vec::new();
    for (path, body) in &files {
        let tmp = path.with_extension("partial");
        if let Err(e) = fs::write(&tmp, body) {
            for t in &staged {
                let _ = fs::remove_file(t);
            }
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        staged.push(tmp);
    }
    for (tmp, (path, _)) in staged.iter().zip(&files) {
        fs::rename(tmp, path)?;
    }
    Ok(())
}

/// Maps the short sweep variable names onto config keys; anything else is
/// taken as a dotted key.
pub fn sweep_key(variable: &str) -> &str {
    match variable {
        "vgr" => "highway.vgr",
        "throughput" => "intersection.throughput_vph",
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub variable: String,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub policies: Vec<Policy>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub policy: Policy,
    pub run_id: String,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// Completed runs in (value, policy, seed) order.
    pub rows: Vec<SweepRow>,
    pub rows_path: PathBuf,
    pub aggregate_path: PathBuf,
}

/// Run every (value, seed, policy) combination in parallel. Tables are
/// written even when a run fails, covering the runs that completed; the
/// first failure is then returned.
pub fn sweep(config_path: &Path, cfg: &ScenarioConfig, spec: &SweepSpec, out_dir: &Path) -> Result<SweepOutcome> {
    if spec.values.is_empty() || spec.seeds.is_empty() || spec.policies.is_empty() {
        return Err(Error::InvalidConfig { line: None, msg: "a sweep needs at least one value, seed and policy".into() });
    }
    let key = sweep_key(&spec.variable);
    let variants: Vec<ScenarioConfig> = spec.values.iter().map(|&v| with_override(cfg, key, v)).collect::<Result<_>>()?;
    for &p in &spec.policies {
        if !p.supports(cfg.kind) {
            return Err(Error::UnsupportedPolicy { policy: p.to_string(), scenario: cfg.kind.to_string() });
        }
    }

    let mut jobs = Vec::new();
    for (vi, &value) in spec.values.iter().enumerate() {
        for &policy in &spec.policies {
            for &seed in &spec.seeds {
                jobs.push((vi, value, policy, seed));
            }
        }
    }
    let results: Vec<Result<SweepRow>> = jobs
        .par_iter()
        .map(|&(vi, value, policy, seed)| {
            let (m, summary) = run(config_path, &variants[vi], seed, policy, out_dir)?;
            Ok(SweepRow { value, seed, policy, run_id: m.run_id, summary })
        })
        .collect();

    let mut rows = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let sweep_id = {
        let mut h = Sha256::new();
        h.update(to_toml(cfg).as_bytes());
        h.update(format!("\n{key}={:?}\nseeds={:?}\npolicies={:?}\n", spec.values, spec.seeds, spec.policies).as_bytes());
        hex::encode(h.finalize())[..16].to_string()
    };
    fs::create_dir_all(out_dir)?;
    let rows_path = out_dir.join(format!("sweep_{sweep_id}_rows.csv"));
    let aggregate_path = out_dir.join(format!("sweep_{sweep_id}_aggregate.csv"));
    fs::write(&rows_path, rows_csv(key, &rows))?;
    fs::write(&aggregate_path, aggregate_csv(key, &rows))?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(SweepOutcome { rows, rows_path, aggregate_path }),
    }
}

const ROW_HEADER: &str = "run_id,spawned,exited,remaining_final,remaining_mean,mean_speed,mean_abs_accel,mean_speed_sd,throughput_vph,safety_violations,conservation_violations";

pub fn rows_csv(key: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{key},seed,policy,{ROW_HEADER}\n");
    for r in rows {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.2},{},{}",
            r.value,
            r.seed,
            r.policy,
            r.run_id,
            s.spawned,
            s.exited,
            s.remaining_final,
            s.remaining_mean,
            s.mean_speed,
            s.mean_abs_accel,
            s.mean_speed_sd,
            s.throughput_vph,
            s.safety_violations,
            s.conservation_violations
        );
    }
    out
}

/// Sample mean and standard deviation (n − 1; zero for a single sample).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One line per (value, policy) with mean and sd over seeds.
pub fn aggregate_csv(key: &str, rows: &[SweepRow]) -> String {
    type Field = fn(&RunSummary) -> f64;
    let fields: [(&str, Field); 6] = [
        ("remaining_final", |s| s.remaining_final as f64),
        ("remaining_mean", |s| s.remaining_mean),
        ("mean_speed", |s| s.mean_speed),
        ("mean_abs_accel", |s| s.mean_abs_accel),
        ("mean_speed_sd", |s| s.mean_speed_sd),
        ("throughput_vph", |s| s.throughput_vph),
    ];
    let mut out = format!("{key},policy,n");
    for (name, _) in &fields {
        let _ = write!(out, ",{name}_mean,{name}_sd");
    }
    out.push_str(",safety_violations\n");
    let mut groups: Vec<(f64, Policy, Vec<&RunSummary>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|g| g.0 == r.value && g.1 == r.policy) {
            Some(g) => g.2.push(&r.summary),
            None => groups.push((r.value, r.policy, vec![&r.summary])),
        }
    }
    for (value, policy, sums) in groups {
        let _ = write!(out, "{value},{policy},{}", sums.len());
        for (_, f) in &fields {
            let xs: Vec<f64> = sums.iter().map(|s| f(s)).collect();
            let (m, sd) = mean_sd(&xs);
            let _ = write!(out, ",{m:.4},{sd:.4}");
        }
        let _ = writeln!(out, ",{}", sums.iter().map(|s| s.safety_violations).sum::<usize>());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short() -> ScenarioConfig {
        ScenarioConfig { duration: 20.0, ..ScenarioConfig::default() }
    }

    #[test]
    fn run_id_depends_on_inputs() {
        let c = short();
        let a = run_id(&c, 1, Policy::MultiVp);
        assert_eq!(a.len(), 16);
        assert_eq!(a, run_id(&c, 1, Policy::MultiVp));
        assert_ne!(a, run_id(&c, 2, Policy::MultiVp));
        assert_ne!(a, run_id(&c, 1, Policy::Fcfs));
    }

    #[test]
    fn mean_sd_small_cases() {
        assert_eq!(mean_sd(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn run_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let (m, s) = run(Path::new("x.toml"), &short(), 4, Policy::MultiVp, dir.path()).unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 3);
        let summary = fs::read_to_string(m.summary_path()).unwrap();
        assert!(summary.contains("safety_violations"));
        assert_eq!(s.conservation_violations, 0);
    }

    #[test]
    fn one_value_one_seed_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SweepSpec { variable: "throughput".into(), values: vec![500.0], seeds: vec![1], policies: vec![Policy::Fcfs] };
        let out = sweep(Path::new("x.toml"), &short(), &spec, dir.path()).unwrap();
        assert_eq!(out.rows.len(), 1);
        let agg = fs::read_to_string(out.aggregate_path).unwrap();
        assert_eq!(agg.lines().count(), 2);
        assert!(agg.starts_with("intersection.throughput_vph,policy,n,"));
    }
}
