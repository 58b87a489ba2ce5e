use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gflm::basis::{fourier_basis, project_scores};
use gflm::curve::{write_wide_csv, Curve, FunctionalDataset, ResponseKind};
use gflm::sim::{generate_sample, SimDesign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;

fn gflm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gflm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_fixture(dir: &Path, name: &str, ds: &FunctionalDataset) -> PathBuf {
    let path = dir.join(name);
    let ids: Vec<String> = (0..ds.len()).map(|i| format!("s{i}")).collect();
    write_wide_csv(fs::File::create(&path).unwrap(), &ids, ds).unwrap();
    path
}

fn fixture(dir: &Path, n: usize) -> PathBuf {
    let design = SimDesign {
        n,
        n_reps: 1,
        seed: 17,
        grid_size: 51,
        ..SimDesign::default()
    };
    write_fixture(dir, "data.csv", &generate_sample(&design).unwrap())
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fit_reports_convergence_and_writes_artifacts() {
    let dir = TempDir::new().unwrap();
    let data = fixture(dir.path(), 300);
    let out = dir.path().join("fit");
    let res = gflm(&["fit", "--data", s(&data), "--basis", "fourier:10", "--p", "3", "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let report = json(&out.join("report.json"));
    assert_eq!(report["converged"], true);
    assert_eq!(report["n"], 300);
    assert_eq!(report["p"], 3);
    assert!(report["deviance"].as_f64().unwrap() > 0.0);
    for f in ["coefficients.csv", "beta_curve.csv", "gamma.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(out.join("gamma.csv")).unwrap().lines().count(), 4);
    assert_eq!(fs::read_to_string(out.join("beta_curve.csv")).unwrap().lines().count(), 52);
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["config"]["p"], 3);
    assert_eq!(manifest["config"]["basis"], "fourier:10");
}

#[test]
fn spqr_fit_writes_link_estimate() {
    let dir = TempDir::new().unwrap();
    let data = fixture(dir.path(), 400);
    let out = dir.path().join("spqr");
    let res = gflm(&["fit", "--data", s(&data), "--basis", "fourier:6", "--p", "3", "--link", "spqr", "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let report = json(&out.join("report.json"));
    assert_eq!(report["intercept"], false);
    assert!(report["bandwidth"].as_f64().unwrap() > 0.0);
    assert!(fs::read_to_string(out.join("link.csv")).unwrap().starts_with("eta,g,g_prime,sigma2"));
}

#[test]
fn missing_response_column_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "id,response,0,0.5,1\na,0.1,0.2,0.3\nb,0.4,0.5,0.6\n").unwrap();
    let res = gflm(&["fit", "--data", s(&path), "--basis", "fourier:1", "--p", "1"]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 2"));
}

#[test]
fn order_beyond_basis_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let data = fixture(dir.path(), 50);
    let res = gflm(&["fit", "--data", s(&data), "--basis", "fourier:4", "--p", "6"]);
    assert_eq!(code(&res), 3);
}

#[test]
fn unknown_flag_values_are_config_errors() {
    let res = gflm(&["fit", "--data", "x.csv", "--link", "probit"]);
    assert_eq!(code(&res), 3);
    let res = gflm(&["fit", "--data", "x.csv", "--basis", "spline:3"]);
    assert_eq!(code(&res), 3);
}

#[test]
fn select_penalty_is_exact_and_single_candidate_wins() {
    let dir = TempDir::new().unwrap();
    let data = fixture(dir.path(), 250);
    let out = dir.path().join("sel");
    let res = gflm(&["select", "--data", s(&data), "--basis", "fourier:10", "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let report = json(&out.join("report.json"));
    let orders = report["candidate_orders"].as_array().unwrap();
    for (k, p) in orders.iter().enumerate() {
        let c = report["criterion_values"][k].as_f64().unwrap();
        let d = report["deviances"][k].as_f64().unwrap();
        assert_eq!(c, d + 2.0 * p.as_f64().unwrap());
    }
    let csv = fs::read_to_string(out.join("selection.csv")).unwrap();
    assert!(csv.starts_with("p,criterion\n"));
    assert_eq!(csv.lines().count(), orders.len() + 1);
    assert!(String::from_utf8_lossy(&res.stdout).contains("chosen p ="));

    let out1 = dir.path().join("sel1");
    let res = gflm(&["select", "--data", s(&data), "--basis", "fourier:10", "--p", "1", "--out", s(&out1)]);
    assert_eq!(code(&res), 0);
    assert_eq!(json(&out1.join("report.json"))["chosen"], 1);
}

fn labelled(
    n: usize,
    seed: u64,
    kind: ResponseKind,
    label: impl Fn(f64, &mut ChaCha8Rng) -> f64,
) -> FunctionalDataset {
    let design = SimDesign {
        n,
        n_reps: 1,
        seed,
        grid_size: 51,
        ..SimDesign::default()
    };
    let ds = generate_sample(&design).unwrap();
    let basis = fourier_basis(1, ds.grid()).unwrap();
    let scores = project_scores(&ds, &basis, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ys = (0..n).map(|i| label(scores.matrix()[(i, 1)], &mut rng)).collect();
    ds.with_responses(ys, kind).unwrap()
}

#[test]
fn classify_near_separable_fixture() {
    let dir = TempDir::new().unwrap();
    let ds = labelled(200, 23, ResponseKind::Binary, |e, rng| {
        let p = 1.0 / (1.0 + (-30.0 * e).exp());
        if rng.random::<f64>() < p { 1.0 } else { 0.0 }
    });
    let data = write_fixture(dir.path(), "sep.csv", &ds);
    let out = dir.path().join("cls");
    let res = gflm(&["classify", "--data", s(&data), "--basis", "fourier:5", "--p", "2", "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let report = json(&out.join("report.json"));
    assert!(report["leave_one_out"]["overall"].as_f64().unwrap() <= 0.05, "{report}");
    let probs = fs::read_to_string(out.join("probabilities.csv")).unwrap();
    assert_eq!(probs.lines().count(), 201);
    let table = fs::read_to_string(out.join("misclassification.csv")).unwrap();
    assert!(table.starts_with("class,n,misclassified,rate\n"));
}

#[test]
fn classify_identical_curves_gives_equal_probabilities() {
    let dir = TempDir::new().unwrap();
    let base = labelled(40, 29, ResponseKind::Binary, |_, rng| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 });
    let curve = base.curves()[0].clone();
    let curves: Vec<Curve> = (0..40).map(|_| curve.clone()).collect();
    let ds = FunctionalDataset::new(
        base.grid().clone(),
        base.weight().clone(),
        curves,
        base.responses().to_vec(),
        ResponseKind::Binary,
    )
    .unwrap();
    let data = write_fixture(dir.path(), "flat.csv", &ds);
    let out = dir.path().join("flat");
    let res = gflm(&["classify", "--data", s(&data), "--basis", "fourier:3", "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let probs = fs::read_to_string(out.join("probabilities.csv")).unwrap();
    let p_hat: Vec<f64> = probs
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(p_hat.len(), 40);
    assert!(p_hat.iter().all(|p| (p - p_hat[0]).abs() <= 1e-8));
}

#[test]
fn classify_rejects_continuous_responses() {
    let dir = TempDir::new().unwrap();
    let ds = labelled(30, 31, ResponseKind::Continuous, |e, _| e);
    let data = write_fixture(dir.path(), "cont.csv", &ds);
    let res = gflm(&["classify", "--data", s(&data), "--basis", "fourier:3", "--p", "2"]);
    assert_eq!(code(&res), 3);
}

#[test]
fn band_writes_one_row_per_grid_point() {
    let dir = TempDir::new().unwrap();
    let data = fixture(dir.path(), 300);
    let out = dir.path().join("band");
    let res = gflm(&["band", "--data", s(&data), "--basis", "fourier:8", "--p", "3", "--alpha", "0.05", "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let band = fs::read_to_string(out.join("band.csv")).unwrap();
    assert!(band.starts_with("t,lower,upper\n"));
    assert_eq!(band.lines().count(), 52);
    let c = json(&out.join("report.json"))["c_alpha"].as_f64().unwrap();
    assert!((c - (4.0 + 8f64.sqrt() * 1.6448536269514722) / 300.0).abs() < 1e-9);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = TempDir::new().unwrap();
    let data = fixture(dir.path(), 200);
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("cfg");
    fs::write(
        &cfg,
        format!("data = {:?}\nbasis = \"fourier:6\"\np = 2\nalpha = 0.1\nout = {:?}\n", s(&data), s(&out)),
    )
    .unwrap();
    let res = gflm(&["fit", "--config", s(&cfg), "--p", "4"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["config"]["p"], 4);
    assert_eq!(m["config"]["alpha"], 0.1);
    assert_eq!(m["config"]["basis"], "fourier:6");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "p = \"three\"\n").unwrap();
    assert_eq!(code(&gflm(&["fit", "--config", s(&bad), "--data", s(&data)])), 3);
}

#[test]
fn simulate_power_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec![
            "simulate", "--experiment", "power", "--delta", "0", "--sizes", "50", "--reps", "100", "--seed", "7",
            "--out", s(&out),
        ];
        args.extend_from_slice(extra);
        let res = gflm(&args);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        (
            fs::read_to_string(out.join("power.csv")).unwrap(),
            fs::read_to_string(out.join("power_reps.csv")).unwrap(),
        )
    };
    let a = run("a", &[]);
    let b = run("b", &["--sequential"]);
    assert_eq!(a, b);
    assert_eq!(a.0.lines().count(), 2);
}

#[test]
fn simulate_calibration_emits_one_statistic_per_rep() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("cal");
    let res = gflm(&["simulate", "--experiment", "calibration", "--n", "300", "--reps", "25", "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(out.join("calibration.csv")).unwrap();
    assert_eq!(csv.lines().count(), 26);
}

#[test]
fn simulate_coverage_near_nominal() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("cov");
    let res = gflm(&[
        "simulate", "--experiment", "coverage", "--n", "500", "--reps", "300", "--alpha", "0.05", "--out", s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let rate = json(&out.join("coverage_summary.json"))["rate"].as_f64().unwrap();
    assert!((0.90..=0.99).contains(&rate), "{rate}");
    assert_eq!(fs::read_to_string(out.join("coverage.csv")).unwrap().lines().count(), 301);
}

#[test]
fn invalid_simulation_design_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let res = gflm(&["simulate", "--reps", "0", "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&res), 3);
}
