use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_stevm");

fn config(class: &str) -> String {
    format!(
        r#"
[model]
class = "{class}"
covariates = ["altitude", "precipitation"]
label = "M{class}"

[mesh]
nx = 6
ny = 6

[fit]
max_full_grid_dim = 4

[simulate]
stations = 40

[simulate.mesh]
nx = 6
ny = 6

[excursion]
samples = 1000
grid_nx = 3
grid_ny = 3
"#
    )
}

fn stevm(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).env("STEVM_THREADS", "1").output().expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn simulate(dir: &Path, class: &str) {
    fs::write(dir.join("c.toml"), config(class)).unwrap();
    ok(stevm(dir, &["simulate", "--config", "c.toml", "--seed", "11", "--out", "d.csv", "--truth", "t.toml"]));
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let head = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (head, rows)
}

#[test]
fn malformed_config_exits_2_without_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "1");
    fs::write(d.join("bad.toml"), "[mesh]\nnxx = 6\n").unwrap();
    let out = stevm(d, &["fit", "--config", "bad.toml", "--data", "d.csv", "--run", "run"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("mesh.nx"), "{err}");
    assert!(!d.join("run").join("fit.bin").exists());

    fs::write(d.join("bad2.toml"), "[model\nclass = 1").unwrap();
    let out = stevm(d, &["fit", "--config", "bad2.toml", "--data", "d.csv", "--run", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("run").exists());
}

#[test]
fn fit_predict_evaluate_excursion_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "1");
    ok(stevm(d, &["fit", "--config", "c.toml", "--data", "d.csv", "--run", "run"]));
    assert!(d.join("run/fit.bin").exists());
    let (head, rows) = read_csv(&d.join("run/summary.csv"));
    assert_eq!(head[0], "parameter");
    assert!(rows.iter().any(|r| r[0] == "altitude"));

    ok(stevm(d, &["evaluate", "--run", "run"]));
    ok(stevm(d, &["predict", "--run", "run"]));
    // Training predictions reproduce the fitted linear predictor.
    let (_, obs) = read_csv(&d.join("run/observations.csv"));
    let (ph, pred) = read_csv(&d.join("run/predictions.csv"));
    let col = |name: &str| ph.iter().position(|h| h == name).unwrap();
    let train: Vec<&Vec<String>> = pred.iter().filter(|r| r[col("split")] == "train").collect();
    assert_eq!(train.len(), obs.len());
    for (o, p) in obs.iter().zip(&train) {
        assert_eq!(o[1], p[col("station_id")]);
        let a: f64 = o[5].parse().unwrap();
        let b: f64 = p[col("eta_mean")].parse().unwrap();
        assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
    }

    ok(stevm(d, &["excursion", "--run", "run", "--seed", "3", "--threshold", "50"]));
    let (eh, ex) = read_csv(&d.join("run/excursion_50.csv"));
    assert_eq!(eh, ["location_id", "lon", "lat", "marginal_prob", "excursion_value", "mc_se"]);
    assert!(ex.len() > 9);
    let geo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/excursion_50.geojson")).unwrap()).unwrap();
    assert_eq!(geo["features"].as_array().unwrap().len(), ex.len());
    assert!(d.join("run/exceedance.csv").exists());

    // Same inputs, same bytes.
    ok(stevm(d, &["fit", "--config", "c.toml", "--data", "d.csv", "--run", "run2"]));
    ok(stevm(d, &["excursion", "--run", "run2", "--seed", "3", "--threshold", "50"]));
    for f in ["fit.bin", "summary.csv", "excursion_50.csv"] {
        assert_eq!(fs::read(d.join("run").join(f)).unwrap(), fs::read(d.join("run2").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn simulate_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "1");
    ok(stevm(d, &["simulate", "--config", "c.toml", "--seed", "11", "--out", "e.csv"]));
    assert_eq!(fs::read(d.join("d.csv")).unwrap(), fs::read(d.join("e.csv")).unwrap());
    ok(stevm(d, &["simulate", "--config", "c.toml", "--seed", "12", "--out", "f.csv"]));
    assert_ne!(fs::read(d.join("d.csv")).unwrap(), fs::read(d.join("f.csv")).unwrap());
}

#[test]
fn compare_four_models_gives_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "1");
    let mut runs = Vec::new();
    for class in ["1", "2", "3", "4"] {
        let c = format!("c{class}.toml");
        fs::write(d.join(&c), config(class)).unwrap();
        let run = format!("run{class}");
        ok(stevm(d, &["fit", "--config", &c, "--data", "d.csv", "--run", &run]));
        runs.push(run);
    }
    let mut args = vec!["compare", "--out", "cmp.csv", "--run"];
    args.extend(runs.iter().map(String::as_str));
    ok(stevm(d, &args));
    let (head, rows) = read_csv(&d.join("cmp.csv"));
    assert_eq!(rows.len(), 4);
    for c in ["dic", "waic", "ls", "rmse"] {
        assert!(head.iter().any(|h| h == c), "missing {c}");
    }
    let labels: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(labels, ["M1", "M2", "M3", "M4"]);
}

#[test]
fn unknown_subcommand_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = stevm(dir.path(), &["fit", "--confg", "x.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}
