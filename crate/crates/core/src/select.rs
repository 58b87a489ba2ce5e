//! Order selection by penalized deviance and leave-one-out assessment.

use std::fmt;
use std::io::Write;
use std::ops::RangeInclusive;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::basis::{project_scores, Basis, ScoreMatrix};
use crate::curve::FunctionalDataset;
use crate::error::{GflmError, Result};
use crate::glm::{iwls_fit, ModelFit, SolverConfig};
use crate::link::{LinkSpec, MeanModel};
use crate::par::{map_indexed, Execution};
use crate::spqr::{quasi_deviance, spqr_fit, LinkEstimate, SpqrConfig};

/// Largest order considered by the default search range.
pub const MAX_DEFAULT_ORDER: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Aic,
    Bic,
}

impl Criterion {
    /// `2p` or `p log n`.
    pub fn penalty(self, p: usize, n: usize) -> f64 {
        match self {
            Criterion::Aic => 2.0 * p as f64,
            Criterion::Bic => p as f64 * (n as f64).ln(),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Aic => "aic",
            Criterion::Bic => "bic",
        })
    }
}

impl FromStr for Criterion {
    type Err = GflmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(Criterion::Aic),
            "bic" => Ok(Criterion::Bic),
            other => Err(GflmError::Config(format!("unknown criterion {other:?}"))),
        }
    }
}

/// How the mean function is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Known(LinkSpec),
    /// Estimated link; `init` supplies the starting direction.
    Spqr { config: SpqrConfig, init: LinkSpec },
}

impl Method {
    pub fn spqr(config: SpqrConfig) -> Self {
        Method::Spqr {
            config,
            init: LinkSpec::logit(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Method::Known(l) => l.kind.to_string(),
            Method::Spqr { .. } => "spqr".into(),
        }
    }

    pub fn fit(&self, scores: &ScoreMatrix, y: &[f64], solver: &SolverConfig) -> Result<FittedModel> {
        match self {
            Method::Known(link) => {
                let fit = iwls_fit(scores, y, link, solver)?;
                Ok(FittedModel {
                    deviance: fit.deviance,
                    fit,
                    link: FittedLink::Known(LinkSpec::with_clamp(link.kind, solver.clamp_eps)),
                })
            }
            Method::Spqr { config, init } => {
                let mut config = *config;
                config.solver = *solver;
                let s = spqr_fit(scores, y, &config, init)?;
                Ok(FittedModel {
                    deviance: s.fit.deviance,
                    fit: s.fit,
                    link: FittedLink::Estimated {
                        estimate: s.link,
                        bandwidth: s.bandwidth,
                    },
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum FittedLink {
    Known(LinkSpec),
    Estimated { estimate: LinkEstimate, bandwidth: f64 },
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub fit: ModelFit,
    pub link: FittedLink,
    pub deviance: f64,
}

impl FittedModel {
    pub fn predict(&self, score_row: &DVector<f64>) -> f64 {
        let eta = score_row.dot(&self.fit.beta);
        match &self.link {
            FittedLink::Known(l) => l.mean(eta),
            FittedLink::Estimated { estimate, .. } => estimate.mean(eta),
        }
    }
}

/// Deviance of a known-link fit, or the quasi-deviance of an estimated link.
/// Saturated means are clamped inside the link's invertible range.
pub fn deviance(fit: &ModelFit, y: &[f64], link: &FittedLink) -> Result<f64> {
    if y.len() != fit.n() {
        return Err(GflmError::Alignment(format!(
            "{} responses for a fit on {} observations",
            y.len(),
            fit.n()
        )));
    }
    Ok(match link {
        FittedLink::Known(l) => l.deviance(y, fit.mu.as_slice()),
        FittedLink::Estimated { estimate, .. } => quasi_deviance(y, fit.eta.as_slice(), estimate),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSelection {
    pub candidate_orders: Vec<usize>,
    pub criterion_values: Vec<f64>,
    pub deviances: Vec<f64>,
    pub chosen: usize,
    pub criterion: Criterion,
    /// Orders whose fit failed, with the reason.
    pub excluded: Vec<(usize, String)>,
}

impl OrderSelection {
    /// CSV with columns `p, criterion`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["p", "criterion"])?;
        for (p, c) in self.candidate_orders.iter().zip(&self.criterion_values) {
            wtr.write_record([p.to_string(), c.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// `1..=min(20, ⌈2 n^{1/4}⌉, J, n − 2)`.
pub fn default_order_range(n: usize, basis_len: usize) -> RangeInclusive<usize> {
    let rate = (2.0 * (n as f64).powf(0.25)).ceil() as usize;
    let hi = MAX_DEFAULT_ORDER.min(rate).min(basis_len).min(n.saturating_sub(2));
    1..=hi.max(1)
}

/// Fits every candidate order and picks the minimizer of `D(p) + P(p)`,
/// breaking ties towards smaller `p`.
pub fn select_order(
    ds: &FunctionalDataset,
    basis: &Basis,
    method: &Method,
    criterion: Criterion,
    p_range: Option<RangeInclusive<usize>>,
    solver: &SolverConfig,
    exec: Execution,
) -> Result<OrderSelection> {
    let n = ds.len();
    let range = p_range.unwrap_or_else(|| default_order_range(n, basis.len()));
    let limit = basis.len().min(n.saturating_sub(2));
    if range.is_empty() || *range.start() == 0 || *range.end() > limit {
        return Err(GflmError::Range(format!(
            "order range {}..={} outside 1..={limit}",
            range.start(),
            range.end()
        )));
    }
    let orders: Vec<usize> = range.collect();
    let full = project_scores(ds, basis, *orders.last().unwrap())?;
    let y = ds.responses();
    let outcomes = map_indexed(orders.len(), exec, |k| {
        let scores = full.truncate(orders[k])?;
        method.fit(&scores, y, solver).map(|m| m.deviance)
    });

    let mut selection = OrderSelection {
        candidate_orders: Vec::new(),
        criterion_values: Vec::new(),
        deviances: Vec::new(),
        chosen: 0,
        criterion,
        excluded: Vec::new(),
    };
    for (p, outcome) in orders.into_iter().zip(outcomes) {
        match outcome {
            Ok(d) => {
                selection.candidate_orders.push(p);
                selection.deviances.push(d);
                selection.criterion_values.push(d + criterion.penalty(p, n));
            }
            Err(e) => selection.excluded.push((p, e.to_string())),
        }
    }
    let best = selection
        .criterion_values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (k, &c)| match best {
            Some((_, b)) if b <= c => best,
            _ => Some((k, c)),
        })
        .ok_or_else(|| {
            GflmError::Selection(format!(
                "every candidate order failed: {}",
                selection
                    .excluded
                    .iter()
                    .map(|(p, e)| format!("p={p}: {e}"))
                    .collect::<Vec<_>>()
                    .join("; ")
            ))
        })?;
    selection.chosen = selection.candidate_orders[best.0];
    Ok(selection)
}

/// Leave-one-out predicted means `p̂_i^{(-i)}`; `None` where the fit without
/// observation `i` failed.
#[derive(Debug, Clone, PartialEq)]
pub struct LooPredictions {
    pub predictions: Vec<Option<f64>>,
}

impl LooPredictions {
    pub fn failures(&self) -> usize {
        self.predictions.iter().filter(|p| p.is_none()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Misclassification {
    pub rate_class0: f64,
    pub rate_class1: f64,
    pub overall: f64,
    pub count_class0: usize,
    pub count_class1: usize,
    pub skipped: usize,
}

impl Misclassification {
    /// Per-class table with columns `class, n, misclassified, rate`.
    pub fn write_report<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["class", "n", "misclassified", "rate"])?;
        let wrong = |rate: f64, n: usize| (rate * n as f64).round() as usize;
        let rows = [
            ("0", self.count_class0, self.rate_class0),
            ("1", self.count_class1, self.rate_class1),
            ("overall", self.count_class0 + self.count_class1, self.overall),
        ];
        for (class, n, rate) in rows {
            wtr.write_record([class.to_string(), n.to_string(), wrong(rate, n).to_string(), rate.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

const MIN_LOO_N: usize = 10;

/// Refits without each observation in turn. Under an estimated link every
/// fold reuses the full-data bandwidth.
pub fn loo_predictions(
    ds: &FunctionalDataset,
    basis: &Basis,
    p: usize,
    method: &Method,
    solver: &SolverConfig,
    exec: Execution,
) -> Result<LooPredictions> {
    let n = ds.len();
    if n < MIN_LOO_N {
        return Err(GflmError::Precondition(format!(
            "leave-one-out needs at least {MIN_LOO_N} observations, have {n}"
        )));
    }
    let scores = project_scores(ds, basis, p)?;
    let y = ds.responses();
    let method = match method {
        Method::Spqr { config, init } if config.bandwidth.is_none() => {
            let full = method.fit(&scores, y, solver)?;
            let FittedLink::Estimated { bandwidth, .. } = full.link else {
                unreachable!("estimated link fit")
            };
            Method::Spqr {
                config: config.with_bandwidth(bandwidth),
                init: *init,
            }
        }
        other => other.clone(),
    };
    let predictions = map_indexed(n, exec, |i| {
        let train = scores.without_row(i);
        let y_train: Vec<f64> = y
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, v)| *v)
            .collect();
        method
            .fit(&train, &y_train, solver)
            .ok()
            .map(|m| m.predict(&scores.row(i)))
    });
    Ok(LooPredictions { predictions })
}

/// `(1/n′) Σ_i (Y_i − p̂_i^{(-i)})²` over folds that fitted, with the number
/// skipped.
pub fn loo_prediction_error(
    ds: &FunctionalDataset,
    basis: &Basis,
    p: usize,
    method: &Method,
    solver: &SolverConfig,
    exec: Execution,
) -> Result<(f64, usize)> {
    let loo = loo_predictions(ds, basis, p, method, solver, exec)?;
    prediction_error(ds.responses(), &loo)
}

pub fn prediction_error(y: &[f64], loo: &LooPredictions) -> Result<(f64, usize)> {
    let (sum, count) = y
        .iter()
        .zip(&loo.predictions)
        .filter_map(|(y, p)| p.map(|p| (y - p).powi(2)))
        .fold((0.0, 0usize), |(s, c), e| (s + e, c + 1));
    if count == 0 {
        return Err(GflmError::Selection("every leave-one-out fit failed".into()));
    }
    Ok((sum / count as f64, loo.failures()))
}

pub fn loo_misclassification(
    ds: &FunctionalDataset,
    basis: &Basis,
    p: usize,
    method: &Method,
    threshold: f64,
    solver: &SolverConfig,
    exec: Execution,
) -> Result<Misclassification> {
    if let Some(i) = ds.responses().iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(GflmError::Precondition(format!(
            "misclassification needs binary responses; response {i} is {}",
            ds.responses()[i]
        )));
    }
    let loo = loo_predictions(ds, basis, p, method, solver, exec)?;
    misclassification(ds.responses(), &loo, threshold)
}

/// Classifies by `p̂_i^{(-i)} ≥ threshold`.
pub fn misclassification(y: &[f64], loo: &LooPredictions, threshold: f64) -> Result<Misclassification> {
    let mut wrong = [0usize; 2];
    let mut total = [0usize; 2];
    for (&yi, p) in y.iter().zip(&loo.predictions) {
        let Some(p) = p else { continue };
        let class = usize::from(yi >= 0.5);
        total[class] += 1;
        if usize::from(*p >= threshold) != class {
            wrong[class] += 1;
        }
    }
    if total[0] + total[1] == 0 {
        return Err(GflmError::Selection("every leave-one-out fit failed".into()));
    }
    let rate = |c: usize| if total[c] == 0 { 0.0 } else { wrong[c] as f64 / total[c] as f64 };
    Ok(Misclassification {
        rate_class0: rate(0),
        rate_class1: rate(1),
        overall: (wrong[0] + wrong[1]) as f64 / (total[0] + total[1]) as f64,
        count_class0: total[0],
        count_class1: total[1],
        skipped: loo.failures(),
    })
}
