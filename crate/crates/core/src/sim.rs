//! Monte Carlo experiments on sine-expansion processes with Bernoulli
//! responses.
//!
//! Every replication draws from its own ChaCha stream keyed by
//! `(seed, rep)`, so results do not depend on the execution mode.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{empirical_basis, fourier_basis, project_scores, reconstruct, Basis, ScoreMatrix};
use crate::curve::{inner_product, Curve, FunctionalDataset, ResponseKind, TimeGrid, WeightMeasure};
use crate::error::{GflmError, Result};
use crate::glm::{weighted_gram, SolverConfig};
use crate::inference::{
    ks_distance_to_normal, no_effect_test, normal_qq, normal_quantile, project_function, simultaneous_band,
    test_statistic, GammaSource,
};
use crate::link::{LinkKind, LinkSpec, MeanModel};
use crate::par::{map_indexed, Execution};
use crate::select::{select_order, Criterion, Method};
use crate::spqr::SpqrConfig;

/// Share of failed replications above which a warning is raised.
pub const FAILURE_WARN_FRACTION: f64 = 0.02;

/// Size of the auxiliary sample behind the population information matrix.
pub const POPULATION_GAMMA_DRAWS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitLink {
    Logit,
    Cloglog,
    Spqr,
}

impl FitLink {
    pub fn method(self) -> Method {
        match self {
            FitLink::Logit => Method::Known(LinkSpec::logit()),
            FitLink::Cloglog => Method::Known(LinkSpec::cloglog()),
            FitLink::Spqr => Method::spqr(SpqrConfig::default()),
        }
    }
}

impl fmt::Display for FitLink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitLink::Logit => "logit",
            FitLink::Cloglog => "cloglog",
            FitLink::Spqr => "spqr",
        })
    }
}

impl FromStr for FitLink {
    type Err = GflmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(FitLink::Logit),
            "cloglog" => Ok(FitLink::Cloglog),
            "spqr" => Ok(FitLink::Spqr),
            other => Err(GflmError::Config(format!("unknown fitting link {other:?}"))),
        }
    }
}

/// Basis the simulated fits are projected on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisMode {
    /// The generating sine basis.
    True,
    /// Eigenfunctions estimated from each sample.
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "rule", content = "p")]
pub enum OrderRule {
    Fixed(usize),
    Aic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimDesign {
    pub n: usize,
    pub n_components: usize,
    /// δ in the coefficient vector `(δ, δ, δ/2, δ/3)`.
    pub coeff_scale: f64,
    pub link_true: LinkKind,
    pub link_fit: FitLink,
    pub n_reps: usize,
    pub seed: u64,
    pub grid_size: usize,
    pub order: OrderRule,
    pub basis: BasisMode,
}

impl Default for SimDesign {
    fn default() -> Self {
        Self {
            n: 200,
            n_components: 20,
            coeff_scale: 1.0,
            link_true: LinkKind::Logit,
            link_fit: FitLink::Logit,
            n_reps: 500,
            seed: 2024,
            grid_size: 101,
            order: OrderRule::Fixed(3),
            basis: BasisMode::True,
        }
    }
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(GflmError::Config(format!("simulation design: {what}")));
        if self.n < 2 || self.n_components == 0 || self.n_reps == 0 {
            return bad("n ≥ 2, n_components ≥ 1 and n_reps ≥ 1 are required");
        }
        if !self.coeff_scale.is_finite() {
            return bad("coeff_scale must be finite");
        }
        if !self.link_true.is_binomial() {
            return bad("link_true must be logit or cloglog");
        }
        if self.grid_size < 2 * self.n_components + 2 {
            return bad("grid_size must be at least 2 n_components + 2");
        }
        if self.n_components < 3 {
            return bad("the signal needs at least 3 components");
        }
        if let OrderRule::Fixed(p) = self.order {
            if p == 0 || p > self.n_components {
                return bad("fixed order outside 1..=n_components");
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(0.0, 1.0, self.grid_size)
    }

    pub fn true_basis(&self) -> Result<Basis> {
        fourier_basis(self.n_components, &self.grid()?)
    }

    /// `(β_0, β_1, .., β_p)`, zero beyond the third slope.
    pub fn true_coefficients(&self, p: usize) -> DVector<f64> {
        let d = self.coeff_scale;
        let signal = [d, d, d / 2.0, d / 3.0];
        DVector::from_fn(p + 1, |k, _| signal.get(k).copied().unwrap_or(0.0))
    }

    /// `β(t) = Σ_j β_j φ_j(t)`.
    pub fn true_slope(&self) -> Result<Curve> {
        let coeffs = self.true_coefficients(3);
        Ok(reconstruct(coeffs.as_slice(), &self.true_basis()?)?.1)
    }

    fn rng(&self, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep as u64);
        rng
    }
}

/// Replication 0 of the design.
pub fn generate_sample(design: &SimDesign) -> Result<FunctionalDataset> {
    generate_replicate(design, 0)
}

pub fn generate_replicate(design: &SimDesign, rep: usize) -> Result<FunctionalDataset> {
    design.validate()?;
    let basis = design.true_basis()?;
    let grid = basis.grid().clone();
    let link = LinkSpec::new(design.link_true);
    let beta = design.true_coefficients(3);
    let mut rng = design.rng(rep);
    let m = grid.len();
    let mut curves = Vec::with_capacity(design.n);
    let mut ys = Vec::with_capacity(design.n);
    for _ in 0..design.n {
        let eps: Vec<f64> = (1..=design.n_components)
            .map(|j| rng.sample::<f64, _>(StandardNormal) / j as f64)
            .collect();
        let mut values = vec![0.0; m];
        for (e, f) in eps.iter().zip(basis.functions()) {
            for (acc, v) in values.iter_mut().zip(f.values()) {
                *acc += e * v;
            }
        }
        let eta = beta[0] + (1..=3).map(|j| beta[j] * eps[j - 1]).sum::<f64>();
        let y = if rng.random::<f64>() < link.mean(eta) { 1.0 } else { 0.0 };
        curves.push(Curve::new(values)?);
        ys.push(y);
    }
    let weight = WeightMeasure::uniform(&grid);
    FunctionalDataset::new(grid, weight, curves, ys, ResponseKind::Binary)
}

struct Prepared {
    basis: Basis,
    scores: ScoreMatrix,
}

fn prepare(design: &SimDesign, ds: &FunctionalDataset, method: &Method, solver: &SolverConfig) -> Result<Prepared> {
    let basis = match design.basis {
        BasisMode::True => design.true_basis()?,
        BasisMode::Estimated => empirical_basis(ds, design.n_components)?,
    };
    let p = match design.order {
        OrderRule::Fixed(p) => p,
        OrderRule::Aic => {
            select_order(ds, &basis, method, Criterion::Aic, None, solver, Execution::Sequential)?.chosen
        }
    };
    let scores = project_scores(ds, &basis, p)?;
    Ok(Prepared { basis, scores })
}

fn failure_warning(label: &str, failed: usize, total: usize) -> Option<String> {
    (failed as f64 > FAILURE_WARN_FRACTION * total as f64)
        .then(|| format!("{label}: {failed} of {total} replications failed and were excluded"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRep {
    pub delta: f64,
    pub n: usize,
    pub rep: usize,
    /// `None` when the fit failed.
    pub statistic: Option<f64>,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub delta: f64,
    pub n: usize,
    pub rate: f64,
    pub valid: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTable {
    pub rows: Vec<PowerRow>,
    pub reps: Vec<PowerRep>,
    pub warnings: Vec<String>,
}

impl PowerTable {
    pub fn rate(&self, delta: f64, n: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.delta == delta && r.n == n).map(|r| r.rate)
    }

    /// Columns `delta, n, rate`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["delta", "n", "rate"])?;
        for r in &self.rows {
            wtr.write_record([r.delta.to_string(), r.n.to_string(), r.rate.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_reps_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["delta", "n", "rep", "statistic", "reject"])?;
        for r in &self.reps {
            wtr.write_record([
                r.delta.to_string(),
                r.n.to_string(),
                r.rep.to_string(),
                r.statistic.map(|t| t.to_string()).unwrap_or_default(),
                r.reject.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Rejection rates of the no-effect test for every `(δ, n)` cell. Cells
/// share replication streams.
pub fn power_experiment(
    design: &SimDesign,
    deltas: &[f64],
    ns: &[usize],
    alpha: f64,
    exec: Execution,
) -> Result<PowerTable> {
    design.validate()?;
    let method = design.link_fit.method();
    let solver = SolverConfig::default();
    let mut table = PowerTable {
        rows: Vec::new(),
        reps: Vec::new(),
        warnings: Vec::new(),
    };
    for &n in ns {
        for &delta in deltas {
            let cell = SimDesign {
                n,
                coeff_scale: delta,
                ..design.clone()
            };
            cell.validate()?;
            let stats = map_indexed(cell.n_reps, exec, |rep| -> Result<f64> {
                let ds = generate_replicate(&cell, rep)?;
                let prep = prepare(&cell, &ds, &method, &solver)?;
                let fit = method.fit(&prep.scores, ds.responses(), &solver)?.fit;
                let source = match method {
                    Method::Known(_) => GammaSource::EmpiricalKnownLink,
                    Method::Spqr { .. } => GammaSource::EmpiricalSpqr,
                };
                Ok(no_effect_test(&fit, alpha, source)?.statistic)
            });
            let crit = normal_quantile(1.0 - alpha);
            let mut rejections = 0;
            let mut failed = 0;
            for (rep, s) in stats.into_iter().enumerate() {
                let statistic = s.ok();
                let reject = statistic.is_some_and(|t| t.abs() > crit);
                failed += usize::from(statistic.is_none());
                rejections += usize::from(reject);
                table.reps.push(PowerRep {
                    delta,
                    n,
                    rep,
                    statistic,
                    reject,
                });
            }
            let valid = cell.n_reps - failed;
            table.warnings.extend(failure_warning(&format!("delta={delta}, n={n}"), failed, cell.n_reps));
            table.rows.push(PowerRow {
                delta,
                n,
                rate: if valid == 0 { f64::NAN } else { rejections as f64 / valid as f64 },
                valid,
                failed,
            });
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisspecCell {
    pub generator: LinkKind,
    pub fitter: FitLink,
    /// Pointwise mean of the normalized `β̂(t)` over valid replications.
    pub mean_curve: Vec<f64>,
    /// Mean L² distance between the normalized `β̂` and the normalized truth.
    pub mean_l2_error: f64,
    pub errors: Vec<Option<f64>>,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisspecResult {
    pub grid: Vec<f64>,
    /// Normalized true slope function.
    pub truth: Vec<f64>,
    pub cells: Vec<MisspecCell>,
    pub warnings: Vec<String>,
}

impl MisspecResult {
    pub fn cell(&self, generator: LinkKind, fitter: FitLink) -> Option<&MisspecCell> {
        self.cells
            .iter()
            .find(|c| c.generator == generator && c.fitter == fitter)
    }

    /// Long format `t, generator, fitter, beta`, truth rows under fitter `truth`.
    pub fn write_curves_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["t", "generator", "fitter", "beta"])?;
        for c in &self.cells {
            for (t, v) in self.grid.iter().zip(&c.mean_curve) {
                wtr.write_record([t.to_string(), c.generator.to_string(), c.fitter.to_string(), v.to_string()])?;
            }
        }
        for (t, v) in self.grid.iter().zip(&self.truth) {
            wtr.write_record([t.to_string(), String::new(), "truth".into(), v.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_errors_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["generator", "fitter", "rep", "l2_error"])?;
        for c in &self.cells {
            for (rep, e) in c.errors.iter().enumerate() {
                wtr.write_record([
                    c.generator.to_string(),
                    c.fitter.to_string(),
                    rep.to_string(),
                    e.map(|e| e.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

fn l2_norm(f: &[f64], grid: &TimeGrid, w: &WeightMeasure) -> Result<f64> {
    let c = Curve::new(f.to_vec())?;
    Ok(inner_product(&c, &c, w, grid)?.sqrt())
}

fn normalized(f: &[f64], grid: &TimeGrid, w: &WeightMeasure) -> Result<Vec<f64>> {
    let norm = l2_norm(f, grid, w)?;
    if norm == 0.0 {
        return Err(GflmError::Precondition("slope estimate is identically zero".into()));
    }
    Ok(f.iter().map(|v| v / norm).collect())
}

/// Fits every generator × fitter pair on the same replications and compares
/// L²-normalized slope estimates against the normalized truth.
pub fn link_misspec_experiment(
    design: &SimDesign,
    generators: &[LinkKind],
    fitters: &[FitLink],
    exec: Execution,
) -> Result<MisspecResult> {
    design.validate()?;
    let grid = design.grid()?;
    let w = WeightMeasure::uniform(&grid);
    // Under δ = 0 there is no direction to recover and the truth stays zero.
    let slope = design.true_slope()?;
    let truth = if design.coeff_scale == 0.0 {
        slope.values().to_vec()
    } else {
        normalized(slope.values(), &grid, &w)?
    };
    let solver = SolverConfig::default();
    let mut result = MisspecResult {
        grid: grid.points().to_vec(),
        truth: truth.clone(),
        cells: Vec::new(),
        warnings: Vec::new(),
    };
    for &generator in generators {
        let gen = SimDesign {
            link_true: generator,
            ..design.clone()
        };
        gen.validate()?;
        // One dataset per replication, shared by all fitters.
        let per_rep = map_indexed(gen.n_reps, exec, |rep| -> Vec<Option<Vec<f64>>> {
            let Ok(ds) = generate_replicate(&gen, rep) else {
                return vec![None; fitters.len()];
            };
            fitters
                .iter()
                .map(|fitter| {
                    let method = fitter.method();
                    let run = || -> Result<Vec<f64>> {
                        let prep = prepare(&gen, &ds, &method, &solver)?;
                        let fit = method.fit(&prep.scores, ds.responses(), &solver)?.fit;
                        if !fit.converged {
                            return Err(GflmError::Precondition("fit did not converge".into()));
                        }
                        let (_, slope) = reconstruct(fit.beta.as_slice(), &prep.basis)?;
                        normalized(slope.values(), &grid, &w)
                    };
                    run().ok()
                })
                .collect()
        });
        for (k, &fitter) in fitters.iter().enumerate() {
            let curves: Vec<Option<&Vec<f64>>> = per_rep.iter().map(|r| r[k].as_ref()).collect();
            let mut errors = Vec::with_capacity(curves.len());
            let mut mean_curve = vec![0.0; grid.len()];
            let mut valid = 0usize;
            for c in &curves {
                errors.push(match c {
                    Some(c) => {
                        valid += 1;
                        for (acc, v) in mean_curve.iter_mut().zip(c.iter()) {
                            *acc += v;
                        }
                        let diff: Vec<f64> = c.iter().zip(&truth).map(|(a, b)| a - b).collect();
                        Some(l2_norm(&diff, &grid, &w)?)
                    }
                    None => None,
                });
            }
            let failed = curves.len() - valid;
            for v in &mut mean_curve {
                *v /= valid.max(1) as f64;
            }
            let total: f64 = errors.iter().flatten().sum();
            result
                .warnings
                .extend(failure_warning(&format!("{generator}/{fitter}"), failed, curves.len()));
            result.cells.push(MisspecCell {
                generator,
                fitter,
                mean_curve,
                mean_l2_error: if valid == 0 { f64::NAN } else { total / valid as f64 },
                errors,
                failed,
            });
        }
    }
    Ok(result)
}

/// Information matrix used when the statistic is evaluated at the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationGamma {
    /// `Γ` at the true coefficients, by auxiliary Monte Carlo.
    Population,
    /// `Γ̃` from each fit.
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub statistics: Vec<f64>,
    pub failed: usize,
    pub mean: f64,
    pub sd: f64,
    pub ks_distance: f64,
    pub qq: Vec<(f64, f64)>,
}

impl Calibration {
    /// Columns `rep, T`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["rep", "T"])?;
        for (rep, t) in self.statistics.iter().enumerate() {
            wtr.write_record([rep.to_string(), t.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_qq_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["normal_quantile", "T"])?;
        for (z, t) in &self.qq {
            wtr.write_record([z.to_string(), t.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// `Γ` at the true coefficients on the generating basis, averaged over
/// `draws` fresh score vectors.
pub fn population_gamma(design: &SimDesign, p: usize, draws: usize) -> Result<DMatrix<f64>> {
    design.validate()?;
    let beta = design.true_coefficients(p);
    let mut rng = design.rng(usize::MAX);
    let mut x = DMatrix::zeros(draws, p + 1);
    for i in 0..draws {
        x[(i, 0)] = 1.0;
        for j in 1..=p {
            x[(i, j)] = rng.sample::<f64, _>(StandardNormal) / j as f64;
        }
    }
    let eta = &x * &beta;
    weighted_gram(&x, &eta, &LinkSpec::new(design.link_true))
}

/// Replicated `T` at the true coefficients with the intercept included.
pub fn statistic_calibration(design: &SimDesign, gamma: CalibrationGamma, exec: Execution) -> Result<Calibration> {
    design.validate()?;
    let OrderRule::Fixed(p) = design.order else {
        return Err(GflmError::Config("calibration needs a fixed order".into()));
    };
    if design.basis != BasisMode::True {
        return Err(GflmError::Config("calibration needs the generating basis".into()));
    }
    let beta = design.true_coefficients(p);
    let population = match gamma {
        CalibrationGamma::Population => Some(population_gamma(design, p, POPULATION_GAMMA_DRAWS)?),
        CalibrationGamma::Empirical => None,
    };
    let method = Method::Known(LinkSpec::new(design.link_true));
    let solver = SolverConfig::default();
    let outcomes = map_indexed(design.n_reps, exec, |rep| -> Result<f64> {
        let ds = generate_replicate(design, rep)?;
        let prep = prepare(design, &ds, &method, &solver)?;
        let fit = method.fit(&prep.scores, ds.responses(), &solver)?.fit;
        if !fit.converged {
            return Err(GflmError::Precondition("fit did not converge".into()));
        }
        let g = population.as_ref().unwrap_or(&fit.gamma_tilde);
        test_statistic(&fit.beta, &beta, g, fit.n(), true)
    });
    let statistics: Vec<f64> = outcomes.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    let failed = outcomes.len() - statistics.len();
    if statistics.len() < 2 {
        return Err(GflmError::Precondition("fewer than two replications succeeded".into()));
    }
    let k = statistics.len() as f64;
    let mean = statistics.iter().sum::<f64>() / k;
    let sd = (statistics.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    Ok(Calibration {
        ks_distance: ks_distance_to_normal(&statistics),
        qq: normal_qq(&statistics),
        statistics,
        failed,
        mean,
        sd,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// `None` when the fit failed.
    pub covered: Vec<Option<bool>>,
    pub rate: f64,
    pub failed: usize,
    pub alpha: f64,
}

impl Coverage {
    /// Columns `rep, covered`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["rep", "covered"])?;
        for (rep, c) in self.covered.iter().enumerate() {
            wtr.write_record([rep.to_string(), c.map(|c| c.to_string()).unwrap_or_default()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Share of replications whose simultaneous band contains the true
/// `β_0 + Σ_{j≤p} β_j ρ_j(t)` at every grid point.
pub fn coverage_experiment(design: &SimDesign, alpha: f64, exec: Execution) -> Result<Coverage> {
    design.validate()?;
    let slope = design.true_slope()?;
    let beta0 = design.coeff_scale;
    let method = Method::Known(LinkSpec::new(design.link_true));
    let solver = SolverConfig::default();
    let outcomes = map_indexed(design.n_reps, exec, |rep| -> Result<bool> {
        let ds = generate_replicate(design, rep)?;
        let prep = prepare(design, &ds, &method, &solver)?;
        let fit = method.fit(&prep.scores, ds.responses(), &solver)?.fit;
        if !fit.converged {
            return Err(GflmError::Precondition("fit did not converge".into()));
        }
        let band = simultaneous_band(&fit, &prep.basis, alpha)?;
        let truth = project_function(beta0, &slope, &prep.basis, fit.p())?;
        let (b0, curve) = reconstruct(truth.as_slice(), &prep.basis)?;
        let theta = Curve::new(curve.values().iter().map(|v| v + b0).collect())?;
        Ok(band.covers(&theta))
    });
    let covered: Vec<Option<bool>> = outcomes.into_iter().map(|r| r.ok()).collect();
    let valid: Vec<bool> = covered.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(GflmError::Precondition("every replication failed".into()));
    }
    Ok(Coverage {
        rate: valid.iter().filter(|&&c| c).count() as f64 / valid.len() as f64,
        failed: covered.len() - valid.len(),
        covered,
        alpha,
    })
}

/// Everything needed to rerun an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub version: String,
    pub design: SimDesign,
    pub extra: serde_json::Value,
}

impl Manifest {
    pub fn new(experiment: &str, design: &SimDesign, extra: serde_json::Value) -> Self {
        Self {
            experiment: experiment.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            design: design.clone(),
            extra,
        }
    }

    pub fn write_json<W: Write>(&self, mut writer: W) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| GflmError::InvalidInput(format!("manifest serialization: {e}")))?;
        writeln!(writer, "{text}")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, delta: f64, reps: usize) -> SimDesign {
        SimDesign {
            n,
            coeff_scale: delta,
            n_reps: reps,
            ..SimDesign::default()
        }
    }

    #[test]
    fn null_design_has_fair_coin_responses() {
        let ds = generate_sample(&small(4000, 0.0, 1)).unwrap();
        let mean = ds.responses().iter().sum::<f64>() / 4000.0;
        assert!((mean - 0.5).abs() <= 3.0 * (0.25f64 / 4000.0).sqrt());
    }

    #[test]
    fn generated_scores_have_expected_variances() {
        let d = small(2000, 1.0, 1);
        let ds = generate_sample(&d).unwrap();
        let scores = project_scores(&ds, &d.true_basis().unwrap(), 5).unwrap();
        for j in 1..=5 {
            let col = scores.matrix().column(j);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1999.0;
            let target = 1.0 / (j * j) as f64;
            assert!((var / target - 1.0).abs() < 0.15, "j={j}: {var}");
        }
    }

    #[test]
    fn replicates_are_reproducible_and_distinct() {
        let d = small(50, 1.0, 3);
        let a = generate_replicate(&d, 1).unwrap();
        let b = generate_replicate(&d, 1).unwrap();
        let c = generate_replicate(&d, 2).unwrap();
        assert_eq!(a.curve_matrix(), b.curve_matrix());
        assert_eq!(a.responses(), b.responses());
        assert_ne!(a.curve_matrix(), c.curve_matrix());
    }

    #[test]
    fn invalid_designs_are_config_errors() {
        for d in [
            SimDesign { n_reps: 0, ..SimDesign::default() },
            SimDesign { link_true: LinkKind::Identity, ..SimDesign::default() },
            SimDesign { grid_size: 10, ..SimDesign::default() },
            SimDesign { order: OrderRule::Fixed(0), ..SimDesign::default() },
        ] {
            assert!(matches!(d.validate(), Err(GflmError::Config(_))));
        }
    }

    #[test]
    fn power_is_identical_across_execution_modes() {
        let d = small(60, 0.5, 12);
        let a = power_experiment(&d, &[0.0, 1.0], &[60], 0.05, Execution::Sequential).unwrap();
        let b = power_experiment(&d, &[0.0, 1.0], &[60], 0.05, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 2);
        assert_eq!(a.reps.len(), 24);
    }

    #[test]
    fn statistic_at_truth_is_bounded_below() {
        let d = SimDesign {
            order: OrderRule::Fixed(4),
            ..small(300, 1.0, 20)
        };
        let cal = statistic_calibration(&d, CalibrationGamma::Empirical, Execution::Parallel).unwrap();
        let floor = -(5.0f64 / 2.0).sqrt();
        assert_eq!(cal.statistics.len() + cal.failed, 20);
        assert!(cal.statistics.iter().all(|&t| t >= floor - 1e-12));
    }

    #[test]
    fn population_gamma_for_null_logit_is_a_quarter_of_second_moments() {
        let d = small(100, 0.0, 1);
        let g = population_gamma(&d, 2, 50_000).unwrap();
        assert!((g[(0, 0)] - 0.25).abs() < 1e-12);
        assert!((g[(1, 1)] - 0.25).abs() < 0.01);
        assert!((g[(2, 2)] - 0.0625).abs() < 0.003);
    }

    #[test]
    fn wider_alpha_gives_narrower_coverage() {
        let d = small(300, 1.0, 40);
        let tight = coverage_experiment(&d, 0.5, Execution::Parallel).unwrap();
        let loose = coverage_experiment(&d, 0.05, Execution::Parallel).unwrap();
        let mut nested = true;
        for (a, b) in tight.covered.iter().zip(&loose.covered) {
            if let (Some(true), Some(false)) = (a, b) {
                nested = false;
            }
        }
        assert!(nested);
        assert!(tight.rate < loose.rate);
    }

    #[test]
    fn manifest_round_trips() {
        let d = small(50, 1.0, 3);
        let m = Manifest::new("power", &d, serde_json::json!({"alpha": 0.05}));
        let mut out = Vec::new();
        m.write_json(&mut out).unwrap();
        let back: Manifest = serde_json::from_slice(&out).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn power_csv_has_one_row_per_cell() {
        let d = small(40, 0.0, 5);
        let t = power_experiment(&d, &[0.0, 2.0], &[40, 80], 0.05, Execution::Sequential).unwrap();
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 5);
    }
}
