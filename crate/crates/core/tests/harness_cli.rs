use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn stabilab(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_stabilab"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("STABILAB_THREADS", t),
        None => cmd.env_remove("STABILAB_THREADS"),
    };
    cmd.output().expect("failed to run stabilab")
}

fn write_config(dir: &Path, value: &Value) -> String {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn run_cmd(sub: &str, config: &Value, threads: Option<&str>) -> (Output, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), config);
    let out = dir.path().join("out");
    let o = stabilab(&[sub, "--config", &cfg, "--out", out.to_str().unwrap()], threads);
    (o, dir)
}

fn worked() -> Value {
    json!({
        "schema_version": 1,
        "master_seed": 42,
        "loss": {"family": "quadratic"},
        "dataset": {"source": "synthetic", "n": 10, "d": 1, "radius": 2f64.sqrt(), "generator": "unit_fixed"},
        "neighbor": {"index": 0, "replacement": {"a": [1.0], "y": 1.0}},
        "sgd": {"eta": 0.1, "batch": 1, "k_max": 40, "theta0": [0.0]},
        "regime": "quadratic",
        "replicas": 8
    })
}

fn ridge() -> Value {
    json!({
        "schema_version": 1,
        "master_seed": 9,
        "loss": {"family": "ridge_quadratic", "mu0": 1.0},
        "dataset": {"source": "synthetic", "n": 24, "d": 3, "radius": 0.5, "generator": "gaussian_clipped"},
        "neighbor": {"index": 5},
        "sgd": {"eta": 0.01, "batch": 3, "k_max": 300, "theta0": [0.2, 0.0, -0.1]},
        "regime": "strongly_convex",
        "replicas": 48,
        "checkpoints": [0, 10, 100, 300]
    })
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn keys(v: &Value) -> Vec<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

#[test]
fn bounds_worked_example_reports_point_eight() {
    let (o, dir) = run_cmd("bounds", &worked(), None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let b = read_json(&dir.path().join("out/bounds.json"));
    assert!((b["value"].as_f64().unwrap() - 0.8).abs() < 1e-12);
    assert_eq!(b["k"], json!("inf"));
    assert_eq!(b["regime"], json!("quadratic"));
}

#[test]
fn bounds_zero_horizon_is_zero() {
    let mut v = worked();
    v["bound"] = json!({"k": 0});
    let (o, dir) = run_cmd("bounds", &v, None);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(read_json(&dir.path().join("out/bounds.json"))["value"], json!(0.0));
}

#[test]
fn bounds_inadmissible_exits_two_naming_the_constraint() {
    let mut v = ridge();
    v["sgd"]["eta"] = json!(0.2);
    let (o, _dir) = run_cmd("bounds", &v, None);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("mu/(K1^2 + 64 D^2 K2^2)"), "{err}");
}

#[test]
fn config_errors_exit_one_with_location() {
    let mut v = worked();
    v["sgd"]["etaa"] = json!(0.1);
    let (o, _dir) = run_cmd("bounds", &v, None);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("etaa") && err.contains("line"), "{err}");

    let o = stabilab(&["bounds", "--config", "/nonexistent/config.json", "--out", "/tmp"], None);
    assert_eq!(o.status.code(), Some(1));
    let o = stabilab(&["frobnicate"], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn assignment_with_one_replica_is_rejected() {
    let mut v = worked();
    v["replicas"] = json!(1);
    v["estimators"] = json!(["assignment"]);
    let (o, _dir) = run_cmd("simulate", &v, None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("replicas >= 2"));
}

#[test]
fn simulate_identical_pair_is_all_zero() {
    let mut v = ridge();
    v["neighbor"] = json!({"index": 0, "identical": true});
    let (o, dir) = run_cmd("simulate", &v, None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(dir.path().join("out/estimates.csv")).unwrap();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        assert_eq!(rec[3].parse::<f64>().unwrap(), 0.0);
        assert_eq!(&rec[5], "ok");
        rows += 1;
    }
    assert_eq!(rows, 4 * 2);
}

#[test]
fn golden_output_schemas() {
    let v = ridge();
    let (o, dir) = run_cmd("simulate", &v, None);
    assert_eq!(o.status.code(), Some(0));
    let out = dir.path().join("out");
    let csv_text = fs::read_to_string(out.join("estimates.csv")).unwrap();
    assert_eq!(csv_text.lines().next().unwrap(), "k,estimator,p,value,stderr,status");
    let estimators: Vec<&str> = csv_text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(estimators[..2], ["coupled", "assignment"]);

    let summary = read_json(&out.join("summary.json"));
    assert_eq!(
        keys(&summary),
        ["b", "checkpoints", "diverged_replicas", "eta", "master_seed", "n", "p", "regime", "replicas"]
    );
    let row = &summary["checkpoints"][3];
    assert_eq!(keys(row), ["bound", "bound_error", "estimates", "k"]);
    assert_eq!(keys(&row["estimates"][0]), ["estimator", "k", "p", "status", "stderr", "value"]);
    for cp in summary["checkpoints"].as_array().unwrap() {
        assert!(cp["bound"].is_number(), "every empirical row pairs with a bound: {cp}");
    }
    assert_eq!(keys(&read_json(&out.join("timing.json"))), ["wall_clock_seconds"]);

    let (o, dir) = run_cmd("bounds", &v, None);
    assert_eq!(o.status.code(), Some(0));
    let b = read_json(&dir.path().join("out/bounds.json"));
    assert_eq!(
        keys(&b),
        ["admissible", "b", "constants_used", "eta", "k", "log_value", "n", "p", "regime", "value"]
    );

    let (o, dir) = run_cmd("verify", &v, None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("out/certificates.jsonl")).unwrap();
    for line in text.lines() {
        let c: Value = serde_json::from_str(line).unwrap();
        assert_eq!(keys(&c), ["confidence", "details", "kind", "margin", "passed"]);
    }
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    ["estimates.csv", "summary.json", "certificates.jsonl", "bounds.json"]
        .iter()
        .filter_map(|f| fs::read(dir.join(f)).ok().map(|b| (f.to_string(), b)))
        .collect()
}

#[test]
fn outputs_are_byte_identical_across_runs_and_thread_counts() {
    let v = ridge();
    let mut runs = Vec::new();
    for threads in [None, Some("1"), Some("4")] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), &v);
        let out = dir.path().join("out");
        for sub in ["simulate", "verify", "bounds"] {
            let o = stabilab(&[sub, "--config", &cfg, "--out", out.to_str().unwrap()], threads);
            assert_eq!(o.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
        }
        runs.push(outputs(&out));
        drop(dir);
    }
    assert_eq!(runs[0].len(), 4);
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn verify_exit_codes() {
    let (o, _dir) = run_cmd("verify", &worked(), None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut v = worked();
    v["sgd"]["batch"] = json!(10);
    v["certificates"] = json!([{"kind": "contraction", "claimed_rate": 0.5}]);
    let (o, _dir) = run_cmd("verify", &v, None);
    assert_eq!(o.status.code(), Some(3));
    v["certificates"] = json!([]);
    let (o, _dir) = run_cmd("verify", &v, None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nothing to verify"));
}

#[test]
fn report_aggregates_outputs() {
    let v = ridge();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &v);
    let out = dir.path().join("out");
    for sub in ["bounds", "simulate", "verify"] {
        assert_eq!(stabilab(&[sub, "--config", &cfg, "--out", out.to_str().unwrap()], None).status.code(), Some(0));
    }
    let o = stabilab(&["report", "--in", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0));
    let md = fs::read_to_string(out.join("report.md")).unwrap();
    assert_eq!(md, String::from_utf8(o.stdout).unwrap());
    for section in ["## Bound", "## Simulation", "## Certificates"] {
        assert!(md.contains(section), "missing {section}");
    }
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(stabilab(&["report", "--in", empty.path().to_str().unwrap()], None).status.code(), Some(1));
}

#[test]
fn output_dir_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = worked();
    v["output_dir"] = json!(dir.path().join("from_config"));
    let cfg = write_config(dir.path(), &v);
    assert_eq!(stabilab(&["bounds", "--config", &cfg], None).status.code(), Some(0));
    assert!(dir.path().join("from_config/bounds.json").exists());
}

#[test]
fn dataset_file_source() {
    let dir = tempfile::tempdir().unwrap();
    let spec = stabilab::model::DatasetSpec::new(8, 2, 1.0, stabilab::model::Generator::SphereUniform);
    let ds = stabilab::model::make_synthetic_dataset(&spec, 4).unwrap();
    let path = dir.path().join("data.jsonl");
    ds.write_jsonl(fs::File::create(&path).unwrap()).unwrap();
    let mut v = worked();
    v["dataset"] = json!({"source": "file", "path": path});
    v["neighbor"] = json!({"index": 1});
    v["sgd"]["theta0"] = json!([0.0, 0.0]);
    v["sgd"]["batch"] = json!(2);
    v["sgd"]["eta"] = json!(0.3);
    let cfg = write_config(dir.path(), &v);
    let out = dir.path().join("out");
    let o = stabilab(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}
