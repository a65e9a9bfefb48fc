use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "grid": { "T": 1.0, "n_steps": 1000 },
  "model": { "n": 1, "m": 1, "F": -1, "f": 0, "G": 1, "g": 0, "Q": 1, "R": 1, "x0": 0 },
  "uncertainty": { "mu": 1 }
}"#;

fn rkb(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rkb"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.json");
    fs::write(&p, SMALL).unwrap();
    p.to_string_lossy().into_owned()
}

fn data_rows(csv: &str) -> Vec<Vec<f64>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn simulate_default_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rkb(&["simulate", "--paths", "2"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("simulate.csv")).unwrap();
    let first = csv.lines().next().unwrap();
    assert!(first.starts_with("# rkb ") && first.contains("config_hash=") && first.contains("seed="));
    assert_eq!(csv.lines().nth(1), Some("path_id,t,x_0,m_0,logw"));
    assert_eq!(data_rows(&csv).len(), 2 * 20_001);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["seed"].is_u64());
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere.json");
    let o = rkb(&["simulate", "--config", missing.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.json"));
}

#[test]
fn bad_config_names_the_json_path() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    fs::write(&p, SMALL.replace("\"F\": -1", "\"F\": [[-1, 0]]")).unwrap();
    let o = rkb(&["riccati", "--config", p.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.F"));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let before = fs::read(&cfg).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        let o = rkb(&["simulate", "--config", &cfg, "--paths", "20", "--seed", "5", "--theta", "0.5", "--threads", threads], dir);
        assert!(o.status.success());
    }
    assert_eq!(fs::read(a.join("simulate.csv")).unwrap(), fs::read(b.join("simulate.csv")).unwrap());
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    let c = tmp.path().join("c");
    rkb(&["simulate", "--config", &cfg, "--paths", "20", "--seed", "6", "--theta", "0.5"], &c);
    assert_ne!(fs::read(a.join("simulate.csv")).unwrap(), fs::read(c.join("simulate.csv")).unwrap());
    assert_eq!(fs::read(&cfg).unwrap(), before);
}

#[test]
fn riccati_reaches_the_steady_state() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rkb(&["riccati"], tmp.path());
    assert!(o.status.success());
    let rows = data_rows(&fs::read_to_string(tmp.path().join("riccati.csv")).unwrap());
    let last = rows.last().unwrap();
    assert_eq!(last[0], 20.0);
    assert!((last[1] - (2f64.sqrt() - 1.0)).abs() < 1e-6);
}

#[test]
fn filter_reads_simulator_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    assert!(rkb(&["simulate", "--config", &cfg, "--paths", "3", "--theta", "1"], tmp.path()).status.success());
    let obs = tmp.path().join("simulate.csv");
    let o = rkb(
        &["filter", "--config", &cfg, "--obs", obs.to_str().unwrap(), "--path-id", "1", "--theta-hat", "1"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(tmp.path().join("filter.csv")).unwrap();
    assert_eq!(text.lines().nth(1), Some("t,xhat_0,dI_0,P_00"));
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 1001);
    assert!(rows[1000][2].is_nan());
    assert!((rows[1000][3] - 0.385_818_596_186_334).abs() < 1e-9);
}

#[test]
fn zero_drift_decomposition_has_zero_gaps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    assert!(rkb(&["decompose", "--config", &cfg, "--theta", "0"], tmp.path()).status.success());
    let text = fs::read_to_string(tmp.path().join("decompose.csv")).unwrap();
    assert_eq!(
        text.lines().nth(1),
        Some("t,classical,correction_ode,correction_printed,direct_robust,gap_ode,gap_printed")
    );
    for r in data_rows(&text) {
        assert_eq!((r[5], r[6]), (0.0, 0.0));
    }
}

#[test]
fn minimax_lower_value_is_the_riccati_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = rkb(&["minimax", "--config", &cfg, "--t", "1", "--class", "bang_bang"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("minimax.json")).unwrap()).unwrap();
    let rep = &v["report"];
    assert!((rep["lower_value"].as_f64().unwrap() - 0.385_818_596_186_334).abs() < 1e-6);
    assert!((rep["upper_value"].as_f64().unwrap() - 0.690_439_283_856_464).abs() < 1e-4);
    assert_eq!(rep["adversary_class"]["kind"], "bang_bang");
    assert_eq!(v["profile_midpoint_convex"], true);
    let profile = data_rows(&fs::read_to_string(tmp.path().join("minimax_profile.csv")).unwrap());
    assert_eq!(profile.len(), 11);
}

#[test]
fn coarse_grid_fails_the_riccati_check() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/coarse.json");
    let o = rkb(&["verify", "--config", cfg, "--check", "1"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL") && l.contains("riccati")), "{stdout}");
}

#[test]
fn certain_scenario_reports_zero_gap() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/certain.json");
    let o = rkb(&["verify", "--config", cfg, "--check", "8"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(v["checks"][0]["name"], "saddle");
    assert_eq!(v["checks"][0]["metrics"]["duality_gap"], 0.0);
}

#[test]
fn unknown_check_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(rkb(&["verify", "--check", "11"], tmp.path()).status.code(), Some(2));
}
