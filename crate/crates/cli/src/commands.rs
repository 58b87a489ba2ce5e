use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gflm::basis::{empirical_basis, fourier_basis, project_scores, reconstruct, Basis};
use gflm::curve::{read_wide_csv_path, FunctionalDataset, ResponseKind, WideCsv};
use gflm::inference::{no_effect_test, simultaneous_band, GammaSource, InferenceReport};
use gflm::link::LinkKind;
use gflm::select::{
    loo_predictions, misclassification, select_order, FittedLink, FittedModel, LooPredictions, Method,
    OrderSelection,
};
use gflm::sim::{
    coverage_experiment, link_misspec_experiment, power_experiment, statistic_calibration, CalibrationGamma,
    FitLink,
};
use gflm::GflmError;
use serde::Serialize;
use serde_json::json;

use crate::config::{BasisSpec, Experiment, RunConfig};

/// Failure of a command, carrying the process exit code.
#[derive(Debug)]
pub struct CommandError {
    pub code: i32,
    pub message: String,
}

pub const EXIT_DATA: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_CONVERGENCE: i32 = 4;

impl From<GflmError> for CommandError {
    fn from(e: GflmError) -> Self {
        let code = match &e {
            GflmError::Alignment(_)
            | GflmError::InvalidInput(_)
            | GflmError::Resolution(_)
            | GflmError::Numeric { .. }
            | GflmError::Parse { .. }
            | GflmError::Io(_) => EXIT_DATA,
            GflmError::Range(_) | GflmError::Precondition(_) | GflmError::Config(_) => EXIT_CONFIG,
            GflmError::RankDeficient
            | GflmError::Separation { .. }
            | GflmError::Smoothing(_)
            | GflmError::DegenerateLink { .. }
            | GflmError::Conditioning { .. }
            | GflmError::Selection(_) => EXIT_CONVERGENCE,
        };
        CommandError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CommandError {
    fn from(e: std::io::Error) -> Self {
        GflmError::Io(e).into()
    }
}

type CmdResult<T = ()> = Result<T, CommandError>;

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'static str,
    config: &'a RunConfig,
    outputs: Vec<String>,
}

/// Output directory that records every file written to it.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> CmdResult<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn create(&mut self, name: &str) -> CmdResult<BufWriter<File>> {
        self.written.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CmdResult {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
        writeln!(w)?;
        Ok(())
    }

    fn finish(mut self, cfg: &RunConfig) -> CmdResult {
        let outputs = self.written.clone();
        self.json(
            "manifest.json",
            &Manifest {
                command: &cfg.command,
                version: env!("CARGO_PKG_VERSION"),
                config: cfg,
                outputs,
            },
        )
    }
}

fn load(cfg: &RunConfig) -> CmdResult<WideCsv> {
    let data = cfg.data.as_deref().expect("validated");
    Ok(read_wide_csv_path(data, cfg.grid.as_deref(), None)?)
}

fn build_basis(cfg: &RunConfig, ds: &FunctionalDataset) -> CmdResult<Basis> {
    let basis = match cfg.basis {
        BasisSpec::Fourier(j) => fourier_basis(j, ds.grid())?,
        BasisSpec::Empirical(j) => empirical_basis(ds, j)?,
    };
    if let Some(p) = cfg.p {
        if p > basis.len() {
            return Err(GflmError::Config(format!(
                "p = {p} but the estimated basis kept only {} functions",
                basis.len()
            ))
            .into());
        }
    }
    Ok(basis)
}

/// Fixed order, or the criterion minimizer over the default range.
fn choose_order(
    cfg: &RunConfig,
    ds: &FunctionalDataset,
    basis: &Basis,
    method: &Method,
) -> CmdResult<(usize, Option<OrderSelection>)> {
    match cfg.p {
        Some(p) => Ok((p, None)),
        None => {
            let sel = select_order(ds, basis, method, cfg.criterion, None, &cfg.solver, cfg.execution())?;
            Ok((sel.chosen, Some(sel)))
        }
    }
}

fn gamma_source(method: &Method) -> GammaSource {
    match method {
        Method::Known(_) => GammaSource::EmpiricalKnownLink,
        Method::Spqr { .. } => GammaSource::EmpiricalSpqr,
    }
}

struct Fitted {
    basis: Basis,
    model: FittedModel,
    selection: Option<OrderSelection>,
}

fn fit_model(cfg: &RunConfig) -> CmdResult<Fitted> {
    let ds = load(cfg)?.dataset;
    let basis = build_basis(cfg, &ds)?;
    let method = cfg.method();
    let (p, selection) = choose_order(cfg, &ds, &basis, &method)?;
    let scores = project_scores(&ds, &basis, p)?;
    let model = method.fit(&scores, ds.responses(), &cfg.solver)?;
    Ok(Fitted {
        basis,
        model,
        selection,
    })
}

fn write_fit_files(out: &mut Outputs, f: &Fitted) -> CmdResult {
    let fit = &f.model.fit;
    let mut w = out.create("coefficients.csv")?;
    writeln!(w, "term,estimate")?;
    writeln!(w, "intercept,{}", fit.beta[0])?;
    for j in 1..=fit.p() {
        writeln!(w, "beta_{j},{}", fit.beta[j])?;
    }
    drop(w);

    let (_, curve) = reconstruct(fit.beta.as_slice(), &f.basis)?;
    let mut w = out.create("beta_curve.csv")?;
    writeln!(w, "t,beta")?;
    for (t, v) in f.basis.grid().points().iter().zip(curve.values()) {
        writeln!(w, "{t},{v}")?;
    }
    drop(w);

    let mut w = out.create("gamma.csv")?;
    for row in fit.gamma_tilde.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    drop(w);

    if let FittedLink::Estimated { estimate, .. } = &f.model.link {
        estimate.write_csv(out.create("link.csv")?)?;
    }
    if let Some(sel) = &f.selection {
        sel.write_csv(out.create("selection.csv")?)?;
    }
    Ok(())
}

fn fit_report(f: &Fitted, test: Option<&InferenceReport>) -> serde_json::Value {
    let fit = &f.model.fit;
    let bandwidth = match &f.model.link {
        FittedLink::Estimated { bandwidth, .. } => Some(*bandwidth),
        FittedLink::Known(_) => None,
    };
    json!({
        "n": fit.n(),
        "p": fit.p(),
        "converged": fit.converged,
        "iterations": fit.iterations,
        "deviance": f.model.deviance,
        "score_norm": fit.score_norm,
        "intercept": fit.intercept,
        "bandwidth": bandwidth,
        "order_selected_by": f.selection.as_ref().map(|s| s.criterion.to_string()),
        "no_effect_test": test,
    })
}

fn require_convergence(f: &Fitted) -> CmdResult {
    if f.model.fit.converged {
        Ok(())
    } else {
        Err(CommandError {
            code: EXIT_CONVERGENCE,
            message: format!("fit did not converge after {} iterations", f.model.fit.iterations),
        })
    }
}

pub fn cmd_fit(cfg: &RunConfig) -> CmdResult {
    let f = fit_model(cfg)?;
    let mut out = Outputs::new(&cfg.out)?;
    write_fit_files(&mut out, &f)?;
    let test = f
        .model
        .fit
        .converged
        .then(|| no_effect_test(&f.model.fit, cfg.alpha, gamma_source(&cfg.method())))
        .transpose()?;
    let report = fit_report(&f, test.as_ref());
    out.json("report.json", &report)?;
    out.finish(cfg)?;
    println!(
        "n = {}, p = {}, deviance = {:.6}, converged = {}",
        f.model.fit.n(),
        f.model.fit.p(),
        f.model.deviance,
        f.model.fit.converged
    );
    require_convergence(&f)
}

pub fn cmd_band(cfg: &RunConfig) -> CmdResult {
    let f = fit_model(cfg)?;
    require_convergence(&f)?;
    let band = simultaneous_band(&f.model.fit, &f.basis, cfg.alpha)?;
    let test = no_effect_test(&f.model.fit, cfg.alpha, gamma_source(&cfg.method()))?;
    let mut out = Outputs::new(&cfg.out)?;
    write_fit_files(&mut out, &f)?;
    band.write_csv(out.create("band.csv")?, &f.basis)?;
    let mut report = fit_report(&f, Some(&test));
    report["c_alpha"] = json!(band.c_alpha);
    report["alpha"] = json!(cfg.alpha);
    out.json("report.json", &report)?;
    out.finish(cfg)?;
    println!("c(alpha) = {:.6}, T = {:.4}", band.c_alpha, test.statistic);
    Ok(())
}

pub fn cmd_select(cfg: &RunConfig) -> CmdResult {
    let WideCsv { dataset: ds, .. } = load(cfg)?;
    let basis = build_basis(cfg, &ds)?;
    let range = cfg.p.map(|p| 1..=p);
    let sel = select_order(&ds, &basis, &cfg.method(), cfg.criterion, range, &cfg.solver, cfg.execution())?;
    let mut out = Outputs::new(&cfg.out)?;
    sel.write_csv(out.create("selection.csv")?)?;
    out.json("report.json", &sel)?;
    out.finish(cfg)?;
    for (p, e) in &sel.excluded {
        eprintln!("warning: order {p} excluded: {e}");
    }
    println!("chosen p = {} ({})", sel.chosen, sel.criterion);
    Ok(())
}

/// True when all curves coincide, leaving nothing to regress on.
fn curves_are_identical(ds: &FunctionalDataset) -> bool {
    let first = ds.curves()[0].values();
    let scale = first.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    ds.curves()
        .iter()
        .all(|c| c.values().iter().zip(first).all(|(a, b)| (a - b).abs() <= 1e-12 * scale))
}

pub fn cmd_classify(cfg: &RunConfig) -> CmdResult {
    let WideCsv { ids, dataset: ds } = load(cfg)?;
    if ds.kind() != ResponseKind::Binary {
        return Err(GflmError::Config("classify needs binary 0/1 responses".into()).into());
    }
    let y = ds.responses();
    let n = ds.len();
    let (fitted, loo, p) = if curves_are_identical(&ds) {
        // Identical curves carry no information beyond the class balance.
        let total: f64 = y.iter().sum();
        let fitted = vec![total / n as f64; n];
        let loo = LooPredictions {
            predictions: y.iter().map(|yi| Some((total - yi) / (n - 1) as f64)).collect(),
        };
        (fitted, loo, 0)
    } else {
        let basis = build_basis(cfg, &ds)?;
        let method = cfg.method();
        let (p, _) = choose_order(cfg, &ds, &basis, &method)?;
        let scores = project_scores(&ds, &basis, p)?;
        let model = method.fit(&scores, y, &cfg.solver)?;
        let fitted = (0..n).map(|i| model.predict(&scores.row(i))).collect();
        let loo = loo_predictions(&ds, &basis, p, &method, &cfg.solver, cfg.execution())?;
        (fitted, loo, p)
    };
    let mis = misclassification(y, &loo, cfg.threshold)?;

    let mut out = Outputs::new(&cfg.out)?;
    let mut w = out.create("probabilities.csv")?;
    writeln!(w, "id,y,p_hat,p_hat_loo,class")?;
    for i in 0..n {
        let loo_p = loo.predictions[i].map(|v| v.to_string()).unwrap_or_default();
        let class = u8::from(fitted[i] >= cfg.threshold);
        writeln!(w, "{},{},{},{loo_p},{class}", ids[i], y[i], fitted[i])?;
    }
    drop(w);
    mis.write_report(out.create("misclassification.csv")?)?;
    out.json(
        "report.json",
        &json!({ "n": n, "p": p, "threshold": cfg.threshold, "leave_one_out": mis }),
    )?;
    out.finish(cfg)?;
    println!(
        "p = {p}; leave-one-out misclassification: class 0 {:.1}%, class 1 {:.1}%, overall {:.1}%",
        100.0 * mis.rate_class0,
        100.0 * mis.rate_class1,
        100.0 * mis.overall
    );
    if mis.skipped > 0 {
        eprintln!("warning: {} leave-one-out fits failed and were skipped", mis.skipped);
    }
    Ok(())
}

pub fn cmd_simulate(cfg: &RunConfig) -> CmdResult {
    let sim = &cfg.simulate;
    let design = &sim.design;
    let exec = cfg.execution();
    let mut out = Outputs::new(&cfg.out)?;
    let warnings = match sim.experiment {
        Experiment::Power => {
            let table = power_experiment(design, &sim.deltas, &sim.sample_sizes, cfg.alpha, exec)?;
            table.write_csv(out.create("power.csv")?)?;
            table.write_reps_csv(out.create("power_reps.csv")?)?;
            for r in &table.rows {
                println!("delta = {}, n = {}: rejection rate {:.3}", r.delta, r.n, r.rate);
            }
            table.warnings
        }
        Experiment::Misspec => {
            let fitters = [FitLink::Logit, FitLink::Cloglog, FitLink::Spqr];
            let res = link_misspec_experiment(design, &[LinkKind::Logit, LinkKind::Cloglog], &fitters, exec)?;
            res.write_curves_csv(out.create("misspec_curves.csv")?)?;
            res.write_errors_csv(out.create("misspec_errors.csv")?)?;
            let mut w = out.create("misspec_summary.csv")?;
            writeln!(w, "generator,fitter,mean_l2_error,failed")?;
            for c in &res.cells {
                writeln!(w, "{},{},{},{}", c.generator, c.fitter, c.mean_l2_error, c.failed)?;
                println!("{} data, {} fit: mean L2 error {:.4}", c.generator, c.fitter, c.mean_l2_error);
            }
            res.warnings
        }
        Experiment::Calibration => {
            let cal = statistic_calibration(design, CalibrationGamma::Population, exec)?;
            cal.write_csv(out.create("calibration.csv")?)?;
            cal.write_qq_csv(out.create("calibration_qq.csv")?)?;
            out.json(
                "calibration_summary.json",
                &json!({ "mean": cal.mean, "sd": cal.sd, "ks_distance": cal.ks_distance, "failed": cal.failed }),
            )?;
            println!("mean {:.4}, sd {:.4}, KS distance {:.4}", cal.mean, cal.sd, cal.ks_distance);
            Vec::new()
        }
        Experiment::Coverage => {
            let cov = coverage_experiment(design, cfg.alpha, exec)?;
            cov.write_csv(out.create("coverage.csv")?)?;
            out.json(
                "coverage_summary.json",
                &json!({ "rate": cov.rate, "alpha": cov.alpha, "failed": cov.failed }),
            )?;
            println!("simultaneous coverage {:.3}", cov.rate);
            Vec::new()
        }
    };
    for w in warnings {
        eprintln!("warning: {w}");
    }
    out.finish(cfg)
}
