//! One test per acceptance criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line before asserting.

use std::io::Write;
use std::time::{Duration, Instant};

use gflm::basis::{empirical_basis, fourier_basis, project_scores, ScoreMatrix};
use gflm::curve::{read_wide_csv_path, write_wide_csv, TimeGrid};
use gflm::glm::{iwls_fit, SolverConfig};
use gflm::inference::critical_radius;
use gflm::link::{LinkKind, LinkSpec};
use gflm::par::Execution;
use gflm::select::{loo_misclassification, select_order, Criterion, Method};
use gflm::sim::{
    coverage_experiment, generate_sample, link_misspec_experiment, power_experiment,
    statistic_calibration, CalibrationGamma, FitLink, OrderRule, SimDesign,
};
use gflm::smooth::{local_poly_smooth, SmootherConfig};
use gflm::spqr::{spqr_fit, SpqrConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// Written straight to stdout so the line shows even when output is captured.
fn report(id: u32, ok: bool, detail: String) {
    let line = format!("\ncriterion {id}: {} {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(ok, "criterion {id} failed: {detail}");
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed <= Duration::from_secs(secs)
}

fn random_scores(n: usize, p: usize, rng: &mut ChaCha8Rng) -> ScoreMatrix {
    let slopes = DMatrix::from_fn(n, p, |_, j| rng.sample::<f64, _>(StandardNormal) / (j + 1) as f64);
    ScoreMatrix::from_slopes(&slopes).unwrap()
}

fn bernoulli_loglik(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter()
        .zip(y)
        .map(|(&e, &y)| y * e - (1.0 + e.exp()).ln())
        .sum()
}

// Plain Newton-Raphson on the Bernoulli log-likelihood with step halving.
fn newton_logistic(x: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    let mut beta = DVector::zeros(x.ncols());
    for _ in 0..200 {
        let eta = x * &beta;
        let mu: Vec<f64> = eta.iter().map(|e| 1.0 / (1.0 + (-e).exp())).collect();
        let grad = x.transpose() * DVector::from_iterator(y.len(), y.iter().zip(&mu).map(|(y, m)| y - m));
        let mut h = DMatrix::zeros(x.ncols(), x.ncols());
        for (i, m) in mu.iter().enumerate() {
            let row = x.row(i).transpose();
            h += &row * row.transpose() * (m * (1.0 - m));
        }
        let step = h.cholesky().unwrap().solve(&grad);
        let base = bernoulli_loglik(x, y, &beta);
        let mut t = 1.0;
        while bernoulli_loglik(x, y, &(&beta + &step * t)) < base && t > 1e-10 {
            t /= 2.0;
        }
        beta += &step * t;
        if step.norm() * t < 1e-13 {
            break;
        }
    }
    beta
}

#[test]
fn criterion_01_finite_dimensional_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = SolverConfig::default();
    let truth = DVector::from_vec(vec![0.3, 1.0, -0.5, 0.25]);
    let mut worst_logit: f64 = 0.0;
    let mut worst_ols: f64 = 0.0;
    for _ in 0..20 {
        let s = random_scores(500, 3, &mut rng);
        let x = s.matrix().clone();
        let eta = &x * &truth;
        let y: Vec<f64> = eta
            .iter()
            .map(|e| if rng.random::<f64>() < 1.0 / (1.0 + (-e).exp()) { 1.0 } else { 0.0 })
            .collect();
        let fit = iwls_fit(&s, &y, &LinkSpec::logit(), &cfg).unwrap();
        let oracle = newton_logistic(&x, &y);
        worst_logit = worst_logit.max((&fit.beta - &oracle).amax());

        let yc: Vec<f64> = eta.iter().map(|e| e + rng.sample::<f64, _>(StandardNormal)).collect();
        let fit = iwls_fit(&s, &yc, &LinkSpec::identity(), &cfg).unwrap();
        let xtx = x.transpose() * &x;
        let ols = xtx.cholesky().unwrap().solve(&(x.transpose() * DVector::from_vec(yc)));
        worst_ols = worst_ols.max((&fit.beta - &ols).amax());
    }
    let elapsed = start.elapsed();
    report(
        1,
        worst_logit <= 1e-6 && worst_ols <= 1e-10 && within(elapsed, 10),
        format!("max |logit - newton| = {worst_logit:.2e}, max |identity - ols| = {worst_ols:.2e}, {elapsed:.1?}"),
    );
}

#[test]
fn criterion_02_basis_correctness() {
    let start = Instant::now();
    let grid = TimeGrid::uniform(0.0, 1.0, 1001).unwrap();
    let fourier = fourier_basis(20, &grid).unwrap();
    let gram_dev = (fourier.gram() - DMatrix::identity(20, 20)).amax();

    let design = SimDesign {
        n: 5000,
        n_reps: 1,
        seed: 5,
        ..SimDesign::default()
    };
    let ds = generate_sample(&design).unwrap();
    let eig = empirical_basis(&ds, 3).unwrap();
    let ev = eig.eigenvalues().unwrap().to_vec();
    let ev_err = ev
        .iter()
        .zip([1.0, 0.25, 1.0 / 9.0])
        .map(|(l, t)| (l / t - 1.0).abs())
        .fold(0.0, f64::max);
    let eig_gram_dev = (eig.gram() - DMatrix::identity(3, 3)).amax();
    let elapsed = start.elapsed();
    report(
        2,
        gram_dev <= 1e-6 && ev_err <= 0.15 && eig_gram_dev <= 1e-8 && within(elapsed, 60),
        format!(
            "fourier gram dev {gram_dev:.1e}, eigenvalues {ev:.4?} (worst rel err {ev_err:.3}), eigen gram dev {eig_gram_dev:.1e}, {elapsed:.1?}"
        ),
    );
}

fn power_design() -> SimDesign {
    SimDesign {
        n_reps: 500,
        seed: 31,
        order: OrderRule::Fixed(3),
        ..SimDesign::default()
    }
}

#[test]
fn criterion_03_test_level() {
    let start = Instant::now();
    let table = power_experiment(&power_design(), &[0.0], &[200], 0.05, Execution::Parallel).unwrap();
    let rate = table.rate(0.0, 200).unwrap();
    let elapsed = start.elapsed();
    report(
        3,
        (0.02..=0.09).contains(&rate) && within(elapsed, 300),
        format!("rejection rate at delta = 0, n = 200: {rate:.3}, {elapsed:.1?}"),
    );
}

#[test]
fn criterion_04_power_ordering() {
    let start = Instant::now();
    let deltas = [0.5, 1.0, 1.5, 2.0];
    let table = power_experiment(&power_design(), &deltas, &[50, 200], 0.05, Execution::Parallel).unwrap();
    let mut ok = true;
    let mut pairs = Vec::new();
    for d in deltas {
        let small = table.rate(d, 50).unwrap();
        let large = table.rate(d, 200).unwrap();
        ok &= large >= small - 0.05;
        pairs.push(format!("d={d}: {small:.3}/{large:.3}"));
    }
    let top = table.rate(2.0, 200).unwrap();
    ok &= top >= 0.8;
    let elapsed = start.elapsed();
    report(
        4,
        ok && within(elapsed, 600),
        format!("rates n=50/n=200 [{}], {elapsed:.1?}", pairs.join(", ")),
    );
}

#[test]
fn criterion_05_statistic_calibration() {
    let start = Instant::now();
    let design = SimDesign {
        n: 2000,
        n_reps: 500,
        seed: 53,
        order: OrderRule::Fixed(4),
        ..SimDesign::default()
    };
    let cal = statistic_calibration(&design, CalibrationGamma::Population, Execution::Parallel).unwrap();
    let elapsed = start.elapsed();
    report(
        5,
        (-0.15..=0.15).contains(&cal.mean)
            && (0.85..=1.2).contains(&cal.sd)
            && cal.ks_distance <= 0.08
            && within(elapsed, 900),
        format!(
            "mean {:.3}, sd {:.3}, KS {:.4}, {} reps ({} failed), {elapsed:.1?}",
            cal.mean,
            cal.sd,
            cal.ks_distance,
            cal.statistics.len(),
            cal.failed
        ),
    );
}

#[test]
fn criterion_06_band_coverage() {
    let start = Instant::now();
    let c = critical_radius(7, 534, 0.05);
    let design = SimDesign {
        n: 500,
        n_reps: 300,
        seed: 67,
        ..SimDesign::default()
    };
    let cov = coverage_experiment(&design, 0.05, Execution::Parallel).unwrap();
    let elapsed = start.elapsed();
    report(
        6,
        (0.90..=0.99).contains(&cov.rate) && (c - 0.02464).abs() <= 1e-5 && within(elapsed, 600),
        format!("coverage {:.3} ({} failed), c(0.05; p=6, n=534) = {c:.6}, {elapsed:.1?}", cov.rate, cov.failed),
    );
}

#[test]
fn criterion_07_link_misspecification() {
    let start = Instant::now();
    let design = SimDesign {
        n: 1000,
        n_reps: 50,
        seed: 79,
        ..SimDesign::default()
    };
    let fitters = [FitLink::Logit, FitLink::Cloglog, FitLink::Spqr];
    let generators = [LinkKind::Logit, LinkKind::Cloglog];
    let res = link_misspec_experiment(&design, &generators, &fitters, Execution::Parallel).unwrap();
    let mut ok = true;
    let mut lines = Vec::new();
    for (gen, correct) in [(LinkKind::Logit, FitLink::Logit), (LinkKind::Cloglog, FitLink::Cloglog)] {
        let err = |f| res.cell(gen, f).unwrap().mean_l2_error;
        let best = err(correct);
        ok &= fitters.iter().filter(|&&f| f != correct).all(|&f| best < err(f));
        ok &= err(FitLink::Spqr) <= 1.5 * best;
        lines.push(format!(
            "{gen}: logit {:.4}, cloglog {:.4}, spqr {:.4}",
            err(FitLink::Logit),
            err(FitLink::Cloglog),
            err(FitLink::Spqr)
        ));
    }
    let elapsed = start.elapsed();
    report(7, ok && within(elapsed, 1800), format!("mean L2 errors [{}], {elapsed:.1?}", lines.join("; ")));
}

#[test]
fn criterion_08_selection_penalties() {
    let design = SimDesign {
        n: 300,
        n_reps: 1,
        seed: 83,
        ..SimDesign::default()
    };
    let ds = generate_sample(&design).unwrap();
    let basis = design.true_basis().unwrap();
    let mut ok = true;
    let mut worst_mono: f64 = 0.0;
    for criterion in [Criterion::Aic, Criterion::Bic] {
        let sel = select_order(
            &ds,
            &basis,
            &Method::Known(LinkSpec::logit()),
            criterion,
            Some(1..=10),
            &SolverConfig::default(),
            Execution::Parallel,
        )
        .unwrap();
        ok &= sel.candidate_orders == (1..=10).collect::<Vec<_>>();
        for (k, &p) in sel.candidate_orders.iter().enumerate() {
            let expected = match criterion {
                Criterion::Aic => 2.0 * p as f64,
                Criterion::Bic => p as f64 * 300f64.ln(),
            };
            // Compared as a sum so that no rounding from a subtraction enters.
            ok &= sel.criterion_values[k] == sel.deviances[k] + expected;
        }
        for w in sel.deviances.windows(2) {
            worst_mono = worst_mono.max(w[1] - w[0]);
        }
    }
    ok &= worst_mono <= 1e-8;
    report(
        8,
        ok,
        format!("C(p) - D(p) equals the penalty for p = 1..10; largest deviance increase {worst_mono:.1e}"),
    );
}

#[test]
fn criterion_09_smoother_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(97);
    let x: Vec<f64> = (0..300).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
    let y: Vec<f64> = x.iter().map(|v| 1.5 - 2.5 * v).collect();
    let at: Vec<f64> = (0..41).map(|k| -2.0 + 0.1 * k as f64).collect();
    let cfg = SmootherConfig::local_linear(0.3).unwrap();
    let level = local_poly_smooth(&x, &y, &at, &cfg, 0).unwrap();
    let slope = local_poly_smooth(&x, &y, &at, &cfg, 1).unwrap();
    let level_err = level
        .iter()
        .zip(&at)
        .map(|(v, t)| (v - (1.5 - 2.5 * t)).abs())
        .fold(0.0, f64::max);
    let slope_err = slope.iter().map(|v| (v + 2.5).abs()).fold(0.0, f64::max);

    let design = SimDesign {
        n: 500,
        n_reps: 1,
        seed: 101,
        ..SimDesign::default()
    };
    let ds = generate_sample(&design).unwrap();
    let scores = project_scores(&ds, &design.true_basis().unwrap(), 3).unwrap();
    let fit = spqr_fit(&scores, ds.responses(), &SpqrConfig::default(), &LinkSpec::logit()).unwrap();
    let norm_err = fit
        .history
        .iter()
        .map(|it| (it.beta_norm - 1.0).abs())
        .fold(0.0, f64::max);
    let monotone = fit.history.iter().all(|it| it.link_monotone) && fit.link.is_monotone();
    report(
        9,
        level_err <= 1e-8 && slope_err <= 1e-8 && norm_err <= 1e-10 && monotone,
        format!(
            "affine level err {level_err:.1e}, slope err {slope_err:.1e}, |norm - 1| {norm_err:.1e} over {} iterations, monotone {monotone}",
            fit.history.len()
        ),
    );
}

// The real dataset is not shipped. A synthetic file in the same wide format
// goes through order selection and leave-one-out classification.
#[test]
fn criterion_10_medfly_format_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("egg_laying.csv");
    let design = SimDesign {
        n: 120,
        n_reps: 1,
        n_components: 20,
        grid_size: 60,
        seed: 103,
        ..SimDesign::default()
    };
    let ds = generate_sample(&design).unwrap();
    let ids: Vec<String> = (1..=ds.len()).map(|i| format!("fly{i:03}")).collect();
    write_wide_csv(std::fs::File::create(&path).unwrap(), &ids, &ds).unwrap();

    let data = read_wide_csv_path(&path, None, None).unwrap().dataset;
    let basis = empirical_basis(&data, 10).unwrap();
    let method = Method::Known(LinkSpec::logit());
    let cfg = SolverConfig::default();
    let sel = select_order(&data, &basis, &method, Criterion::Aic, None, &cfg, Execution::Parallel).unwrap();
    let mis = loo_misclassification(&data, &basis, sel.chosen, &method, 0.5, &cfg, Execution::Parallel).unwrap();
    let mut table = Vec::new();
    mis.write_report(&mut table).unwrap();
    let table = String::from_utf8(table).unwrap();
    let ok = table.lines().count() == 4 && mis.count_class0 + mis.count_class1 + mis.skipped == data.len();
    report(
        10,
        ok,
        format!(
            "synthetic wide CSV: AIC chose p = {}, misclassification {:.2}/{:.2}/{:.2} (class 0/1/overall)",
            sel.chosen, mis.rate_class0, mis.rate_class1, mis.overall
        ),
    );
}
