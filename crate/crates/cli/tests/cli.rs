//! Golden-file and exit-code tests for the `leggp` binary.
//!
//! Regenerate the golden outputs with `LEGGP_BLESS=1 cargo test -p leggp-cli --test cli`.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use leggp::{dedup, log_likelihood, posterior_predictive, LegParams};
use nalgebra::DMatrix;

const TOL: f64 = 1e-10;

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn leggp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leggp"))
        .args(args)
        .env_remove("LEG_THREADS")
        .output()
        .expect("run leggp")
}

fn stdout_of(args: &[&str]) -> String {
    let out = leggp(args);
    assert!(
        out.status.success(),
        "`leggp {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn parse_csv(text: &str) -> (String, Vec<Vec<f64>>) {
    let mut lines = text.lines();
    let header = lines.next().expect("header").to_string();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse().expect("numeric cell")).collect())
        .collect();
    (header, rows)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * (1.0 + b.abs())
}

/// Compares a CSV against its golden file: exact header and shape, values to `TOL`.
fn check_csv(actual: &str, name: &str) {
    let path = golden(name);
    if std::env::var_os("LEGGP_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let (ha, ra) = parse_csv(actual);
    let (he, re) = parse_csv(&expected);
    assert_eq!(ha, he, "{name}: header");
    assert_eq!(ra.len(), re.len(), "{name}: row count");
    for (i, (a, e)) in ra.iter().zip(&re).enumerate() {
        assert_eq!(a.len(), e.len(), "{name}: row {i} width");
        for (x, y) in a.iter().zip(e) {
            assert!(close(*x, *y), "{name}: row {i}: {x} vs {y}");
        }
    }
}

/// Same for JSON: identical structure, numbers to `TOL`.
fn check_json(actual: &str, name: &str) {
    let path = golden(name);
    if std::env::var_os("LEGGP_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let a: serde_json::Value = serde_json::from_str(actual).unwrap();
    let e: serde_json::Value = serde_json::from_str(&expected).unwrap();
    same_json(&a, &e, name);
}

fn same_json(a: &serde_json::Value, e: &serde_json::Value, at: &str) {
    use serde_json::Value::*;
    match (a, e) {
        (Number(x), Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!(close(x, y), "{at}: {x} vs {y}");
        }
        (Array(x), Array(y)) => {
            assert_eq!(x.len(), y.len(), "{at}: array length");
            for (k, (u, v)) in x.iter().zip(y).enumerate() {
                same_json(u, v, &format!("{at}[{k}]"));
            }
        }
        (Object(x), Object(y)) => {
            let kx: Vec<_> = x.keys().collect();
            let ky: Vec<_> = y.keys().collect();
            assert_eq!(kx, ky, "{at}: keys");
            for (k, v) in x {
                same_json(v, &y[k], &format!("{at}.{k}"));
            }
        }
        _ => assert_eq!(a, e, "{at}"),
    }
}

fn model() -> LegParams {
    serde_json::from_str(&std::fs::read_to_string(golden("model.json")).unwrap()).unwrap()
}

fn series_rows() -> (Vec<f64>, DMatrix<f64>) {
    let (_, rows) = parse_csv(&std::fs::read_to_string(golden("series.csv")).unwrap());
    let times = rows.iter().map(|r| r[0]).collect();
    let values = DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j + 1]);
    (times, values)
}

#[test]
fn simulate_matches_golden() {
    let out = stdout_of(&["simulate", s(&golden("model.json")), "--times", "0,0.5,0.5,1.25,3", "--seed", "7"]);
    check_csv(&out, "simulate.csv");
    assert!(out.starts_with("t,x1,x2\n"));
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let m = golden("model.json");
    let args = ["simulate", s(&m), "--times", "0:10:0.5", "--seed", "11"];
    let other = ["simulate", s(&m), "--times", "0:10:0.5", "--seed", "12"];
    assert_eq!(stdout_of(&args), stdout_of(&args));
    assert_ne!(stdout_of(&args), stdout_of(&other));
}

#[test]
fn smooth_and_forecast_match_golden() {
    let (m, d) = (golden("model.json"), golden("series.csv"));
    let targets = "-1,0.4,0.9,2.0,6,9.5";
    check_csv(&stdout_of(&["smooth", s(&d), s(&m), "--targets", targets]), "smooth.csv");
    check_csv(&stdout_of(&["forecast", s(&d), s(&m), "--targets", targets]), "forecast.csv");
}

#[test]
fn prediction_output_is_bit_exact_with_library() {
    let (m, d) = (golden("model.json"), golden("series.csv"));
    let targets = [-1.0, 0.4, 0.9, 2.0, 6.0, 9.5];
    let spec = "-1,0.4,0.9,2.0,6,9.5";
    let (times, values) = series_rows();
    let ts = dedup(&times, &values).unwrap();
    let preds = posterior_predictive(&ts, &model(), &targets, 0.0).unwrap();

    for (cmd, predictive) in [("smooth", false), ("forecast", true)] {
        let (header, rows) = parse_csv(&stdout_of(&[cmd, s(&d), s(&m), "--targets", spec]));
        assert_eq!(header, "t,mean_1,mean_2,sd_1,sd_2");
        for (row, (t, p)) in rows.iter().zip(targets.iter().zip(&preds)) {
            let var = if predictive { &p.predictive_var } else { &p.uncertainty };
            let want = [*t, p.mean[0], p.mean[1], var[(0, 0)].sqrt(), var[(1, 1)].sqrt()];
            for (a, b) in row.iter().zip(want) {
                assert_eq!(a.to_bits(), b.to_bits(), "{cmd}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn band_flag_overrides_default() {
    let (m, d) = (golden("model.json"), golden("series.csv"));
    let smooth_pred = stdout_of(&["smooth", s(&d), s(&m), "--targets", "1,2", "--band", "predictive"]);
    let forecast = stdout_of(&["forecast", s(&d), s(&m), "--targets", "1,2"]);
    assert_eq!(smooth_pred, forecast);
}

#[test]
fn targets_file_equals_inline_targets() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("targets.txt");
    std::fs::write(&file, "0.1\n2.5\n7\n").unwrap();
    let (m, d) = (golden("model.json"), golden("series.csv"));
    let a = stdout_of(&["smooth", s(&d), s(&m), "--targets-file", s(&file)]);
    let b = stdout_of(&["smooth", s(&d), s(&m), "--targets", "0.1,2.5,7"]);
    assert_eq!(a, b);
}

#[test]
fn far_future_sd_reaches_prior_limit() {
    let (m, d) = (golden("model.json"), golden("series.csv"));
    let (_, rows) = parse_csv(&stdout_of(&["forecast", s(&d), s(&m), "--targets", "400"]));
    let p = model();
    let prior = &p.b * p.b.transpose() + p.noise_cov();
    for j in 0..2 {
        let want = prior[(j, j)].sqrt();
        assert!((rows[0][3 + j] - want).abs() < 1e-8, "sd_{} {} vs {want}", j + 1, rows[0][3 + j]);
    }
}

#[test]
fn noiseless_interpolation_reproduces_observation() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("ou.json");
    std::fs::write(&params, r#"{"N":[[1.0]],"R":[[0.0]],"B":[[1.0]],"Lambda":[[1e-6]]}"#).unwrap();
    let data = dir.path().join("x.csv");
    std::fs::write(&data, "t,x1\n0,0.3\n1,-0.7\n2.5,1.1\n").unwrap();
    let (_, rows) = parse_csv(&stdout_of(&["smooth", s(&data), s(&params), "--targets", "1"]));
    assert!((rows[0][1] + 0.7).abs() < 1e-6, "mean {}", rows[0][1]);
}

#[test]
fn loglik_matches_golden_and_library() {
    let out = stdout_of(&["loglik", s(&golden("series.csv")), s(&golden("model.json"))]);
    check_json(&out, "loglik.json");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let (times, values) = series_rows();
    let lib = log_likelihood(&dedup(&times, &values).unwrap(), &model(), 0.0).unwrap();
    assert_eq!(v["log_likelihood"].as_f64().unwrap(), lib);
    assert_eq!(v["nats"].as_f64().unwrap(), -lib);
    assert_eq!(v["observations"].as_u64().unwrap(), 8);
    assert_eq!(v["nats_per_observation"].as_f64().unwrap(), -lib / 8.0);
}

#[test]
fn unsorted_input_is_sorted_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(golden("series.csv")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[1..].reverse();
    let shuffled = dir.path().join("rev.csv");
    std::fs::write(&shuffled, lines.join("\n") + "\n").unwrap();
    let a = leggp(&["loglik", s(&shuffled), s(&golden("model.json"))]);
    assert!(a.status.success());
    assert!(String::from_utf8_lossy(&a.stderr).contains("sort"));
    let b = stdout_of(&["loglik", s(&golden("series.csv")), s(&golden("model.json"))]);
    let (x, y): (serde_json::Value, serde_json::Value) =
        (serde_json::from_slice(&a.stdout).unwrap(), serde_json::from_str(&b).unwrap());
    assert!(close(x["nats"].as_f64().unwrap(), y["nats"].as_f64().unwrap()));
}

#[test]
fn convert_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conv.json");
    let status = leggp(&["convert", "--celerite", "1,0.5,2,1.5", "--sm", "0.6,0.2,3,1", "-o", s(&out)]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    check_json(&text, "convert.json");
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["meta"]["verified_max_deviation"].as_f64().unwrap() <= 1e-8);
    let p: LegParams = serde_json::from_str(&text).unwrap();
    assert_eq!((p.rank(), p.obs_dim()), (4, 1));
}

#[test]
fn convert_rejects_non_psd_celerite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad.json");
    let res = leggp(&["convert", "--celerite", "1,3,1,1", "-o", s(&out)]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("positive"));
    assert!(!out.exists());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.json");
    let (m, d) = (golden("model.json"), golden("series.csv"));
    for args in [
        vec!["fit", "--input", s(&d), "--rank", "0", "-o", s(&out)],
        vec!["convert", "--celerite", "1,2,3", "-o", s(&out)],
        vec!["smooth", s(&d), s(&m)],
        vec!["loglik", s(&m), s(&m)],
        vec!["bogus"],
    ] {
        let res = leggp(&args);
        assert_eq!(res.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&res.stderr));
    }
    // a one-column series against a two-output model
    let narrow = dir.path().join("narrow.csv");
    std::fs::write(&narrow, "t,x1\n0,1\n1,2\n").unwrap();
    let res = leggp(&["loglik", s(&narrow), s(&m)]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn fit_writes_params_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit.json");
    let d = golden("series.csv");
    let res = leggp(&["fit", "--input", s(&d), "--input", s(&d), "--rank", "2", "--max-iter", "5", "-o", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let p: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    for key in ["N", "R", "B", "Lambda"] {
        assert!(p[key].is_array(), "missing {key}");
    }
    assert!(p["meta"]["final_nats"].is_number());
    let trace: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fit.json.trace.json")).unwrap()).unwrap();
    let keys: Vec<&str> = trace.as_object().unwrap().keys().map(String::as_str).collect();
    for key in [
        "nats_trajectory",
        "final_nats",
        "grad_norm",
        "n_obj_evals",
        "n_grad_evals",
        "status",
        "message",
        "restart_final_nats",
    ] {
        assert!(keys.contains(&key), "trace lacks {key}");
    }
    let traj = trace["nats_trajectory"].as_array().unwrap();
    assert!(!traj.is_empty() && traj.len() <= 6);
}

#[test]
fn more_restarts_never_worse() {
    let dir = tempfile::tempdir().unwrap();
    let d = golden("series.csv");
    let nats = |k: &str| -> f64 {
        let out = dir.path().join(format!("r{k}.json"));
        let res = leggp(&["fit", "--input", s(&d), "--rank", "2", "--max-iter", "30", "--seed", "4", "--restarts", k, "-o", s(&out)]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        v["meta"]["final_nats"].as_f64().unwrap()
    };
    assert!(nats("3") <= nats("1"));
}

#[test]
fn fit_init_file_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f.json");
    let d = golden("series.csv");
    let res = leggp(&["fit", "--input", s(&d), "--rank", "2", "--max-iter", "1", "--init", s(&golden("model.json")), "-o", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let trace: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("f.json.trace.json")).unwrap()).unwrap();
    let first = trace["nats_trajectory"][0].as_f64().unwrap();
    let (times, values) = series_rows();
    let want = -log_likelihood(&dedup(&times, &values).unwrap(), &model(), 0.0).unwrap();
    assert!(close(first, want), "{first} vs {want}");
}

#[test]
fn bench_csv_schema() {
    let out = stdout_of(&["bench", "--rank", "2", "--sizes", "64,128", "--repeats", "1"]);
    let (header, rows) = parse_csv(&out);
    assert_eq!(header, "m,median_seconds");
    let ms: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(ms, [64.0, 128.0]);
    assert!(rows.iter().all(|r| r.len() == 2 && r[1] > 0.0));

    let out = stdout_of(&["bench", "--rank", "1", "--sizes", "2^4..2^6", "--repeats", "1"]);
    let ms: Vec<f64> = parse_csv(&out).1.iter().map(|r| r[0]).collect();
    assert_eq!(ms, [16.0, 32.0, 64.0]);
}

#[test]
fn thread_count_does_not_change_output() {
    let (m, d) = (golden("model.json"), golden("series.csv"));
    let a = stdout_of(&["--threads", "1", "smooth", s(&d), s(&m), "--targets", "0:6:0.5"]);
    let b = stdout_of(&["--threads", "3", "smooth", s(&d), s(&m), "--targets", "0:6:0.5"]);
    assert_eq!(a, b);
}
