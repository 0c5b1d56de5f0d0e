use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn ldo(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldo"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn run_ok(args: &[&str], dir: &Path) {
    let out = ldo(args, dir);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn small(extra: Value) -> Value {
    let mut base = json!({
        "grid": {"nx": 16, "ny": 16},
        "dynamics": {"n_steps": 20, "record_every": 2},
        "ic": {"kind": "fourier_random", "seed": 3, "n_modes": 4, "amplitude": 0.05, "offset": 0.0}
    });
    for (k, v) in extra.as_object().unwrap() {
        base[k] = v.clone();
    }
    base
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small(json!({})));
    run_ok(&["simulate", "--config", &cfg, "--seed", "9", "--out", "a"], dir.path());
    run_ok(&["simulate", "--config", &cfg, "--seed", "9", "--out", "b"], dir.path());
    let a = fs::read(dir.path().join("a/simulation.ldos")).unwrap();
    let b = fs::read(dir.path().join("b/simulation.ldos")).unwrap();
    assert_eq!(a, b);
    run_ok(&["simulate", "--config", &cfg, "--seed", "10", "--out", "c"], dir.path());
    assert_ne!(a, fs::read(dir.path().join("c/simulation.ldos")).unwrap());
}

#[test]
fn zero_state_stays_constant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(json!({"ic": {"kind": "fourier_random", "seed": 1, "n_modes": 4, "amplitude": 0.0, "offset": 0.0}}));
    let cfg = write_config(dir.path(), "c.json", &cfg);
    run_ok(&["simulate", "--config", &cfg, "--out", "o"], dir.path());
    let set = ldo::snapshot::read_snapshots(&dir.path().join("o/simulation.ldos")).unwrap();
    assert_eq!(set.len(), 11);
    for s in set.snapshots() {
        assert_eq!(s, set.first());
    }
}

#[test]
fn perturbed_run_diverges_from_base() {
    let dir = tempfile::tempdir().unwrap();
    let mk = |l: [f64; 2]| {
        json!({
            "grid": {"nx": 50, "ny": 50},
            "dynamics": {"n_steps": 1000, "record_every": 1000},
            "simulate": {"lambda": l}
        })
    };
    let a = write_config(dir.path(), "a.json", &mk([20.0, -20.0]));
    let b = write_config(dir.path(), "b.json", &mk([0.0, 0.0]));
    run_ok(&["simulate", "--config", &a, "--out", "a"], dir.path());
    run_ok(&["simulate", "--config", &b, "--out", "b"], dir.path());
    let sa = ldo::snapshot::read_snapshots(&dir.path().join("a/simulation.ldos")).unwrap();
    let sb = ldo::snapshot::read_snapshots(&dir.path().join("b/simulation.ldos")).unwrap();
    let (ea, eb) = (sa.last().var(ldo::grid::Var::Eta), sb.last().var(ldo::grid::Var::Eta));
    let num: f64 = ea.iter().zip(eb).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = eb.iter().map(|y| y * y).sum();
    assert!((num / den).sqrt() > 0.01);
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &small(json!({"dynamics": {"dt": -1.0}})));
    let out = ldo(&["simulate", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dynamics.dt"));

    let cfg = write_config(dir.path(), "typo.json", &json!({"grid": {"nx": 16, "ny": 16, "dz": 1.0}}));
    let out = ldo(&["simulate", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid"));

    let cfg = write_config(dir.path(), "type.json", &json!({"rom": {"m": "thirty"}}));
    let out = ldo(&["build-rom", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rom.m"));
}

#[test]
fn missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = ldo(&["simulate", "--config", "nope.json"], dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));

    let cfg = write_config(dir.path(), "c.json", &small(json!({"regress": {"inputs": ["missing.ldos"]}})));
    let out = ldo(&["regress", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("regress.inputs[0]") && err.contains("missing.ldos"), "{err}");
}

#[test]
fn corrupt_snapshot_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("junk.ldos"), b"not a snapshot file at all, really not").unwrap();
    let cfg = write_config(dir.path(), "c.json", &small(json!({"regress": {"inputs": ["junk.ldos"]}})));
    let out = ldo(&["regress", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn blow_up_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(json!({
        "dynamics": {"n_steps": 2000, "record_every": 100, "dt": 0.01},
        "ic": {"kind": "fourier_random", "seed": 1, "n_modes": 4, "amplitude": 0.5, "offset": 0.0}
    }));
    let cfg = write_config(dir.path(), "c.json", &cfg);
    let out = ldo(&["simulate", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("blew up at step"));
}

#[test]
fn regress_and_constrain_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let sim = small(json!({
        "dynamics": {"n_steps": 6, "record_every": 1, "dt": 1e-5},
        "ic": {"kind": "fourier_random", "seed": 1, "n_modes": 16, "amplitude": 0.2, "offset": 1.0},
        "simulate": {"n_runs": 3}
    }));
    let sim = write_config(dir.path(), "sim.json", &sim);
    run_ok(&["simulate", "--config", &sim, "--out", "data"], dir.path());
    let inputs = json!(["data/run_000.ldos", "data/run_001.ldos", "data/run_002.ldos"]);

    let fit = write_config(dir.path(), "fit.json", &small(json!({"regress": {"inputs": inputs}})));
    run_ok(&["regress", "--config", &fit, "--out", "fit"], dir.path());
    let report = read_json(&dir.path().join("fit/fit_report.json"));
    assert!(report["max_abs_coef_error"].as_f64().unwrap() < 1e-6, "{report}");
    let csv = fs::read_to_string(dir.path().join("fit/comparison.csv")).unwrap();
    assert!(csv.starts_with("index,true,fitted\n"));
    assert_eq!(csv.lines().count(), 1 + 136 * 3);

    let con = write_config(dir.path(), "con.json", &small(json!({"constrain": {"inputs": inputs}})));
    run_ok(&["constrain-fit", "--config", &con, "--out", "con"], dir.path());
    let lam = read_json(&dir.path().join("con/lambda.json"));
    for l in lam["lambda"].as_array().unwrap() {
        assert!(l.as_f64().unwrap().abs() <= 0.1);
    }
}

#[test]
fn build_rom_writes_distinct_deim_indices() {
    let dir = tempfile::tempdir().unwrap();
    let sim = write_config(dir.path(), "sim.json", &small(json!({"simulate": {"n_runs": 2}})));
    run_ok(&["simulate", "--config", &sim, "--out", "data"], dir.path());
    let cfg = small(json!({"rom": {"inputs": ["data/run_000.ldos", "data/run_001.ldos"], "m": 6, "d": 8}}));
    let cfg = write_config(dir.path(), "rom.json", &cfg);
    run_ok(&["build-rom", "--config", &cfg, "--out", "rom"], dir.path());
    let idx: Vec<usize> = serde_json::from_value(read_json(&dir.path().join("rom/deim_indices.json"))).unwrap();
    let mut sorted = idx.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!((idx.len(), sorted.len()), (8, 8));
    assert!(dir.path().join("rom/model.rom").is_file());

    let cfg = small(json!({"rom": {"inputs": ["data/run_000.ldos"], "m": 40, "d": 40}}));
    let cfg = write_config(dir.path(), "big.json", &cfg);
    let out = ldo(&["build-rom", "--config", &cfg, "--out", "rom2"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn infer_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "grid": {"nx": 10, "ny": 10},
        "dynamics": {"n_steps": 20, "record_every": 2},
        "infer": {"truth_lambda": [20.0, -20.0], "n_samples": 25, "sigma": 1e-4, "coarsen": {"sx": 5, "sy": 5, "st": 5}}
    });
    let cfg = write_config(dir.path(), "inf.json", &cfg);
    run_ok(&["infer", "--config", &cfg, "--seed", "4", "--out", "a"], dir.path());
    run_ok(&["infer", "--config", &cfg, "--seed", "4", "--out", "b"], dir.path());
    let a = fs::read_to_string(dir.path().join("a/posterior.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("b/posterior.csv")).unwrap());
    assert!(a.starts_with("index,lambda_1,lambda_2,log_likelihood,accepted\n"));
    assert_eq!(a.lines().count(), 26);
    let s = read_json(&dir.path().join("a/posterior_summary.json"));
    let rate = s["acceptance_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    assert_eq!(s["mcmc"]["seed"], 4);
}

#[test]
fn coarsen_constant_and_shape() {
    let dir = tempfile::tempdir().unwrap();
    let sim = small(json!({
        "grid": {"nx": 20, "ny": 20},
        "dynamics": {"n_steps": 50, "record_every": 1},
        "ic": {"kind": "fourier_random", "seed": 1, "n_modes": 4, "amplitude": 0.0, "offset": 0.0}
    }));
    let sim = write_config(dir.path(), "sim.json", &sim);
    run_ok(&["simulate", "--config", &sim, "--out", "data"], dir.path());
    let cfg = write_config(dir.path(), "co.json", &json!({"coarsen": {"input": "data/simulation.ldos", "sx": 5, "sy": 5, "st": 25}}));
    run_ok(&["coarsen", "--config", &cfg, "--out", "co"], dir.path());
    let c = read_json(&dir.path().join("co/coarse.json"));
    assert_eq!((c["nt"].as_u64(), c["ny"].as_u64(), c["nx"].as_u64()), (Some(2), Some(4), Some(4)));
    assert!(c["values"].as_array().unwrap().iter().all(|v| v.as_f64() == Some(0.0)));

    let cfg = write_config(dir.path(), "bad.json", &json!({"coarsen": {"input": "data/simulation.ldos", "sx": 3, "sy": 5, "st": 25}}));
    let out = ldo(&["coarsen", "--config", &cfg, "--out", "bad"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sx=3 must divide nx=20"));
}

#[test]
fn converge_reports_first_order_for_euler() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "grid": {"nx": 16, "ny": 16},
        "dynamics": {"dt": 1e-3},
        "ic": {"kind": "fourier_random", "seed": 2, "n_modes": 4, "amplitude": 0.1, "offset": 0.0},
        "converge": {"horizon": 0.064, "levels": 4}
    });
    let cfg = write_config(dir.path(), "cv.json", &cfg);
    run_ok(&["converge", "--config", &cfg, "--out", "cv"], dir.path());
    let r = read_json(&dir.path().join("cv/convergence.json"));
    let slope = r["slope"].as_f64().unwrap();
    assert!((slope - 1.0).abs() < 0.1, "{slope}");
    let csv = fs::read_to_string(dir.path().join("cv/convergence.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}
