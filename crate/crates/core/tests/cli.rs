use std::fs;
use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_formsim");

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

const MINIMAL: &str = "kind = \"intersection\"\nduration = 30.0\n\n[intersection]\nthroughput_vph = 1500.0\n";

#[test]
fn run_writes_three_identical_files_twice() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", MINIMAL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let st = Command::new(BIN)
            .args(["run", "--config", cfg.to_str().unwrap(), "--seed", "7", "--policy", "single-vp", "--out", out.to_str().unwrap()])
            .env_remove("FORMSIM_OUT_DIR")
            .status()
            .unwrap();
        assert!(st.success());
    }
    let names = files(&a);
    assert_eq!(names.len(), 3);
    assert_eq!(names, files(&b));
    for n in &names {
        if n.ends_with(".csv") {
            assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
        }
    }
    let metrics = names.iter().find(|n| n.ends_with("_metrics.csv")).unwrap();
    let text = fs::read_to_string(a.join(metrics)).unwrap();
    assert!(text.starts_with("t,remaining,mean_speed,mean_abs_accel\n"));
    let heat = names.iter().find(|n| n.ends_with("_heatmap.csv")).unwrap();
    assert!(fs::read_to_string(a.join(heat)).unwrap().starts_with("t,bin_start_m,count\n"));
}

#[test]
fn invalid_config_fails_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    for (name, body, line) in [
        ("syntax.toml", "dt = 0.04\nduration = = 3\n", 2),
        ("range.toml", "kind = \"intersection\"\n\n[intersection]\ngap_inside = -9.0\n", 4),
        ("unknown.toml", "dt = 0.04\nspeed = 3\n", 2),
    ] {
        let cfg = write_config(tmp.path(), name, body);
        let o = Command::new(BIN).args(["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).output().unwrap();
        assert!(!o.status.success(), "{name}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(&format!("line {line}")), "{name}: {err}");
        assert!(!out.exists() || files(&out).is_empty());
    }
}

#[test]
fn collisions_do_not_fail_the_run() {
    // far too little spacing between conflicting groups
    let tmp = tempfile::tempdir().unwrap();
    let body = "kind = \"intersection\"\nduration = 120.0\n\n[intersection]\nthroughput_vph = 3000.0\ngap_inside = 5.0\n\n[intersection.zones]\nd_t = 2.0\n";
    let cfg = write_config(tmp.path(), "c.toml", body);
    let out = tmp.path().join("out");
    let st = Command::new(BIN).args(["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).status().unwrap();
    assert!(st.success());
    let summary = files(&out).into_iter().find(|n| n.ends_with("_summary.toml")).unwrap();
    let text = fs::read_to_string(out.join(summary)).unwrap();
    let v: toml::Table = text.parse().unwrap();
    let sv = v["summary"]["safety_violations"].as_integer().unwrap();
    assert!(sv > 0, "expected collisions in {text}");
}

#[test]
fn out_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", MINIMAL);
    let out = tmp.path().join("env_out");
    let st = Command::new(BIN).args(["run", "--config", cfg.to_str().unwrap()]).env("FORMSIM_OUT_DIR", &out).status().unwrap();
    assert!(st.success());
    assert_eq!(files(&out).len(), 3);
}

#[test]
fn sweep_one_value_one_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", MINIMAL);
    let out = tmp.path().join("out");
    let o = Command::new(BIN)
        .args(["sweep", "--config", cfg.to_str().unwrap(), "--var", "throughput", "--values", "1000", "--seed", "1", "--policy", "multi-vp", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let names = files(&out);
    let rows = names.iter().find(|n| n.ends_with("_rows.csv")).unwrap();
    assert_eq!(fs::read_to_string(out.join(rows)).unwrap().lines().count(), 2);
    let agg = names.iter().find(|n| n.ends_with("_aggregate.csv")).unwrap();
    assert_eq!(fs::read_to_string(out.join(agg)).unwrap().lines().count(), 2);
}

#[test]
fn sweep_rejects_policy_for_wrong_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", MINIMAL);
    let st = Command::new(BIN)
        .args(["sweep", "--config", cfg.to_str().unwrap(), "--var", "throughput", "--values", "1000", "--seed", "1", "--policy", "random-lane"])
        .args(["--out", tmp.path().join("o").to_str().unwrap()])
        .status()
        .unwrap();
    assert!(!st.success());
}
