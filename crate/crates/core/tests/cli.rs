use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use vasifit::matcore::{Matrix, Vector};
use vasifit::noise::{sample_increments, NoiseSpec};
use vasifit::simulate::{simulate_path, ModelParams};

fn vasifit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vasifit"))
        .args(args)
        .env_remove("VASIFIT_WORKERS")
        .output()
        .expect("run vasifit")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

struct Dir(tempfile::TempDir);

impl Dir {
    fn new() -> Self {
        Dir(tempfile::tempdir().unwrap())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn write(&self, name: &str, text: &str) -> String {
        fs::write(self.path(name), text).unwrap();
        self.s(name)
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn matrix(v: &Value) -> Vec<Vec<f64>> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect())
        .collect()
}

#[test]
fn simulate_minimal_config() {
    let dir = Dir::new();
    let cfg = dir.write("c.json", r#"{"noise": {"kind": "fbm", "d": 2, "hurst": 0.5}, "n": 100}"#);
    let out = vasifit(&["simulate", "--config", &cfg, "--out", &dir.s("p.csv")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path("p.csv")).unwrap();
    assert_eq!(text.lines().count(), 102);
    assert!(text.starts_with("t,r1,r2\n"));

    let sidecar = json(&dir.path("p.config.json"));
    assert_eq!(sidecar["n"], 100);
    assert_eq!(sidecar["noise"]["hurst"], 0.5);
    assert_eq!(sidecar["estimation"]["t_upper"], 5.0);
    assert!(sidecar.get("workers").is_none());

    // the sidecar alone reproduces the run
    let again = vasifit(&["simulate", "--config", &dir.s("p.config.json"), "--out", &dir.s("q.csv")]);
    assert_eq!(code(&again), 0);
    assert_eq!(fs::read(dir.path("p.csv")).unwrap(), fs::read(dir.path("q.csv")).unwrap());
}

#[test]
fn config_errors_exit_2() {
    let dir = Dir::new();
    let bad_h = dir.write("h.json", r#"{"noise": {"kind": "fbm", "d": 2, "hurst": 1.5}}"#);
    let out = vasifit(&["simulate", "--config", &bad_h, "--out", &dir.s("x.csv")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise.hurst"));

    let unknown = dir.write("u.json", r#"{"n": 10, "nn": 3}"#);
    let out = vasifit(&["simulate", "--config", &unknown, "--out", &dir.s("x.csv")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nn"));

    let params = dir.write(
        "p.json",
        r#"{"params": {"theta": [[1, 2], [2, 1]], "b": [0, 0], "sigma": [[1, 0], [0, 1]]}}"#,
    );
    let out = vasifit(&["simulate", "--config", &params, "--out", &dir.s("x.csv")]);
    assert_eq!(code(&out), 2);

    let out = vasifit(&["simulate", "--out", &dir.s("x.csv"), "--bogus"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_input_exits_5() {
    let dir = Dir::new();
    let out = vasifit(&["fit", "--input", &dir.s("nope.csv"), "--out", &dir.s("f.json")]);
    assert_eq!(code(&out), 5);
}

#[test]
fn fit_of_simulated_path() {
    let dir = Dir::new();
    assert_eq!(code(&vasifit(&["simulate", "--seed", "21", "--out", &dir.s("p.csv")])), 0);
    let out = vasifit(&["fit", "--input", &dir.s("p.csv"), "--out", &dir.s("f.json")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let f = json(&dir.path("f.json"));
    let residual = f["care_residual"].as_f64().unwrap();
    // stored bound is care_tol · scale with care_tol = 1e-9
    let bound = f["diagnostics"]["care_residual_bound"].as_f64().unwrap();
    assert!(residual <= 10.0 * bound, "{residual} > 1e-8·scale");
    let theta = matrix(&f["theta_hat"]);
    assert!((theta[0][0] - 0.5).abs() < 0.1 && (theta[1][1] - 0.3).abs() < 0.1);
    for key in ["b_hat", "sigma_hat", "sigma_sq_hat", "B_hat", "C_hat", "D_hat"] {
        assert!(f.get(key).is_some(), "{key}");
    }
}

#[test]
fn fit_constant_path_exits_4_with_diagnostics() {
    let dir = Dir::new();
    let mut csv = String::from("t,r1,r2\n");
    for k in 0..200 {
        csv.push_str(&format!("{},1.5,2\n", k as f64 * 0.4));
    }
    let input = dir.write("const.csv", &csv);
    let out = vasifit(&["fit", "--input", &input, "--out", &dir.s("f.json")]);
    assert_eq!(code(&out), 4);
    let f = json(&dir.path("f.json"));
    assert_eq!(f["category"], "degenerate");
    assert_eq!(f["diagnostics"]["steps"], 199);
}

#[test]
fn fit_within_monte_carlo_envelope() {
    let dir = Dir::new();
    let out = vasifit(&["mc", "--seed", "1", "--replications", "100", "--out", &dir.s("mc")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&vasifit(&["simulate", "--seed", "999", "--out", &dir.s("p.csv")])), 0);
    assert_eq!(code(&vasifit(&["fit", "--input", &dir.s("p.csv"), "--out", &dir.s("f.json")])), 0);

    let report = json(&dir.path("mc/report.json"));
    let theta = matrix(&json(&dir.path("f.json"))["theta_hat"]);
    let truth = [[0.5, 0.0], [0.0, 0.3]];
    for comp in report["summaries"]["components"].as_array().unwrap() {
        let name = comp["component"].as_str().unwrap();
        if let Some(ij) = name.strip_prefix("theta_") {
            let (i, j) = ij.split_once('_').unwrap();
            let (i, j): (usize, usize) = (i.parse::<usize>().unwrap() - 1, j.parse::<usize>().unwrap() - 1);
            let err = theta[i][j] - truth[i][j];
            let (lo, hi) = (comp["error"]["q01"].as_f64().unwrap(), comp["error"]["q99"].as_f64().unwrap());
            assert!(lo <= err && err <= hi, "{name}: {err} outside [{lo}, {hi}]");
        }
    }
}

#[test]
fn mc_outputs_and_failure_aggregation() {
    let dir = Dir::new();
    let cfg = dir.write("c.json", r#"{"n": 1500, "replications": 4}"#);
    let out = vasifit(&["mc", "--config", &cfg, "--out", &dir.s("mc")]);
    assert_eq!(code(&out), 0);
    let report = json(&dir.path("mc/report.json"));
    assert_eq!(report["metadata"]["successes"].as_u64().unwrap() + report["metadata"]["failures"].as_u64().unwrap(), 4);
    let hist = fs::read_to_string(dir.path("mc/histograms.csv")).unwrap();
    assert!(hist.starts_with("component,bin_left,bin_right,count\n"));
    let reps = fs::read_to_string(dir.path("mc/replications.csv")).unwrap();
    assert_eq!(reps.lines().count(), 5);

    // every fit lacks data: duration equals 2·t_upper exactly
    let cfg = dir.write("f.json", r#"{"n": 100, "replications": 3, "estimation": {"t_upper": 20}}"#);
    let out = vasifit(&["mc", "--config", &cfg, "--out", &dir.s("mc2")]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("all 3 replications failed"));
}

#[test]
fn workers_from_environment() {
    let dir = Dir::new();
    let cfg = dir.write("c.json", r#"{"n": 1500, "replications": 3}"#);
    let out = Command::new(env!("CARGO_BIN_EXE_vasifit"))
        .args(["mc", "--config", &cfg, "--out", &dir.s("mc")])
        .env("VASIFIT_WORKERS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("workers=2"));
    let out = Command::new(env!("CARGO_BIN_EXE_vasifit"))
        .args(["mc", "--config", &cfg, "--out", &dir.s("mc")])
        .env("VASIFIT_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

fn rates_csv(rows: usize) -> String {
    // mean-reverting pair simulated with daily steps
    let params = ModelParams::new(
        Matrix::from_row_slice(2, 2, &[0.05, 0.01, 0.01, 0.03]),
        Vector::from_vec(vec![1.0, 3.0]),
        Matrix::from_diagonal(&Vector::from_vec(vec![0.2, 0.3])),
    )
    .unwrap();
    let inc = sample_increments(&NoiseSpec::brownian(2), rows - 1, 1.0, 4).unwrap();
    let path = simulate_path(&params, &inc, &params.b).unwrap().path;
    let start = chrono::NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
    let mut s = String::from("date,eur,dff\n");
    for k in 0..rows {
        let date = start + chrono::Days::new(k as u64);
        s.push_str(&format!("{date},{},{}\n", path.values[(0, k)], path.values[(1, k)]));
    }
    s
}

#[test]
fn predict_end_to_end() {
    let dir = Dir::new();
    let data = dir.write("rates.csv", &rates_csv(2000));
    let cfg = dir.write(
        "c.json",
        r#"{"noise": {"kind": "fbm", "d": 2, "hurst": 0.5},
            "estimation": {"t_upper": 20, "lag_step": 1},
            "data": {"h": 1.0, "hurst_sweep": [0.5, 0.6]}}"#,
    );
    let out = vasifit(&["predict", "--config", &cfg, "--data", &data, "--out", &dir.s("pr")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = json(&dir.path("pr/metrics.json"));
    assert_eq!(metrics["training_rows"], 1600);
    assert_eq!(metrics["metrics"]["holdout_rows"], 400);
    assert_eq!(metrics["metrics"]["labels"][1], "dff");
    let preds = fs::read_to_string(dir.path("pr/predictions.csv")).unwrap();
    assert!(preds.starts_with("date,actual_1,pred_1,actual_2,pred_2\n"));
    assert_eq!(preds.lines().count(), 401);
    let sweep = json(&dir.path("pr/hurst_sweep.json"));
    assert_eq!(sweep.as_array().unwrap().len(), 2);
    let inc = fs::read_to_string(dir.path("pr/increments.csv")).unwrap();
    assert_eq!(inc.lines().count(), 1600);
    assert!(dir.path("pr/fit.json").exists() && dir.path("pr/config.json").exists());
}

#[test]
fn predict_data_errors() {
    let dir = Dir::new();
    let data = dir.write("rates.csv", &rates_csv(50));
    let cfg = dir.write("c.json", r#"{"data": {"value_columns": ["eur", "gbp"]}}"#);
    let out = vasifit(&["predict", "--config", &cfg, "--data", &data, "--out", &dir.s("pr")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("gbp"));

    let text = rates_csv(50);
    let mut lines: Vec<&str> = text.lines().collect();
    lines.swap(3, 7);
    let shuffled = dir.write("shuffled.csv", &(lines.join("\n") + "\n"));
    let out = vasifit(&["predict", "--data", &shuffled, "--out", &dir.s("pr2")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ordering"));

    let short = dir.write("short.csv", &rates_csv(5));
    let out = vasifit(&["predict", "--data", &short, "--out", &dir.s("pr3")]);
    assert_eq!(code(&out), 4);
}

#[test]
fn noise_check_report() {
    let dir = Dir::new();
    let cfg = dir.write(
        "c.json",
        r#"{"noise": {"kind": "fbm", "d": 2, "hurst": 0.7},
            "noise_check": {"qv_points": 20000, "cov_points": 256, "cov_replications": 400, "cov_stride": 16}}"#,
    );
    let out = vasifit(&["noise-check", "--config", &cfg, "--seed", "3", "--out", &dir.s("n.json")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&dir.path("n.json"));
    assert!(r["qv_max_deviation"].as_f64().unwrap() < 0.1);
    assert_eq!(r["fbm_covariance"]["hurst"], 0.7);
    assert!(dir.path("n.config.json").exists());
}
