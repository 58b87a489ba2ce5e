//! Quasi-likelihood fitting of the p-truncated model by iterated weighted
//! least squares (Fisher scoring) with step halving.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::ScoreMatrix;
use crate::error::{GflmError, Result};
use crate::link::{LinkSpec, MeanModel, DEFAULT_CLAMP};

/// Coefficient norm beyond which a binomial fit is declared separated.
pub const SEPARATION_NORM: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub clamp_eps: f64,
    pub max_halvings: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            clamp_eps: DEFAULT_CLAMP,
            max_halvings: 20,
        }
    }
}

/// Result of a score-equation fit.
#[derive(Debug, Clone)]
pub struct ModelFit {
    /// `(β̂_0, β̂_1, .., β̂_p)`.
    pub beta: DVector<f64>,
    /// Empirical `Γ̃ = DᵀD / n` at `β̂`.
    pub gamma_tilde: DMatrix<f64>,
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    /// `‖U(β̂)‖∞`.
    pub score_norm: f64,
    /// False when location is absorbed elsewhere and `beta[0]` is pinned at 0.
    pub intercept: bool,
}

impl ModelFit {
    pub fn p(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn n(&self) -> usize {
        self.eta.len()
    }
}

struct Pointwise {
    mu: f64,
    deriv: f64,
    var: f64,
}

fn evaluate<M: MeanModel>(model: &M, eta: f64, row: usize) -> Result<Pointwise> {
    let mu = model.mean(eta);
    let deriv = model.mean_deriv(eta);
    let var = model.variance_at(eta);
    if !(mu.is_finite() && deriv.is_finite() && var.is_finite()) || var <= 0.0 {
        return Err(GflmError::Numeric {
            row,
            detail: format!("link evaluation failed at η = {eta:.6e}"),
        });
    }
    Ok(Pointwise { mu, deriv, var })
}

fn check_dims(scores: &ScoreMatrix, y: &[f64], beta_len: usize) -> Result<()> {
    if scores.n() != y.len() {
        return Err(GflmError::Alignment(format!(
            "{} score rows but {} responses",
            scores.n(),
            y.len()
        )));
    }
    if scores.p() + 1 != beta_len {
        return Err(GflmError::Alignment(format!(
            "{} coefficients for {} score columns",
            beta_len,
            scores.p() + 1
        )));
    }
    Ok(())
}

/// `U(β) = Σ_i (Y_i − μ_i) g′(η_i) ε^{(i)} / σ²(μ_i)`.
pub fn score_vector<M: MeanModel>(
    beta: &DVector<f64>,
    scores: &ScoreMatrix,
    y: &[f64],
    model: &M,
) -> Result<DVector<f64>> {
    check_dims(scores, y, beta.len())?;
    let x = scores.matrix();
    let eta = x * beta;
    score_at(x, &eta, y, model)
}

fn score_at<M: MeanModel>(
    x: &DMatrix<f64>,
    eta: &DVector<f64>,
    y: &[f64],
    model: &M,
) -> Result<DVector<f64>> {
    let mut u = DVector::zeros(x.ncols());
    for i in 0..x.nrows() {
        let pt = evaluate(model, eta[i], i)?;
        let c = (y[i] - pt.mu) * pt.deriv / pt.var;
        u.axpy(c, &x.row(i).transpose(), 1.0);
    }
    Ok(u)
}

/// `(1/n) Σ_i g′²(η_i)/σ²(η_i) · x_i x_iᵀ` over the rows of `x`.
pub(crate) fn weighted_gram<M: MeanModel>(
    x: &DMatrix<f64>,
    eta: &DVector<f64>,
    model: &M,
) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let pt = evaluate(model, eta[i], i)?;
        weights.push(pt.deriv * pt.deriv / pt.var);
    }
    Ok(gram_with_weights(x, &weights))
}

pub(crate) fn gram_with_weights(x: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let (n, k) = x.shape();
    let mut g = DMatrix::zeros(k, k);
    for i in 0..n {
        let w = weights[i];
        for a in 0..k {
            let wa = w * x[(i, a)];
            for b in a..k {
                g[(a, b)] += wa * x[(i, b)];
            }
        }
    }
    for a in 0..k {
        for b in a..k {
            let v = g[(a, b)] / n as f64;
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    g
}

/// Plug-in `Γ` with entries `(1/n) Σ_i g′²(η_i)/σ²(μ_i) · ε_k^{(i)} ε_l^{(i)}` at the fitted predictors.
pub fn gamma_population_estimate<M: MeanModel>(
    scores: &ScoreMatrix,
    fit: &ModelFit,
    model: &M,
) -> Result<DMatrix<f64>> {
    if scores.n() != fit.n() {
        return Err(GflmError::Alignment(format!(
            "{} score rows but the fit has {} observations",
            scores.n(),
            fit.n()
        )));
    }
    weighted_gram(scores.matrix(), &fit.eta, model)
}

pub(crate) struct ScoringOutcome {
    pub beta: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
}

/// Fisher scoring on the quasi-score of `model`, halving steps whenever
/// `objective(η)` increases.
pub(crate) fn fisher_scoring<M, F>(
    x: &DMatrix<f64>,
    y: &[f64],
    model: &M,
    mut beta: DVector<f64>,
    cfg: &SolverConfig,
    objective: F,
    separation_check: bool,
) -> Result<ScoringOutcome>
where
    M: MeanModel,
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let n = x.nrows();
    let mut iterations = 0;
    loop {
        let eta = x * &beta;
        let mut u = DVector::zeros(x.ncols());
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let pt = evaluate(model, eta[i], i)?;
            u.axpy((y[i] - pt.mu) * pt.deriv / pt.var, &x.row(i).transpose(), 1.0);
            weights.push(pt.deriv * pt.deriv / pt.var);
        }
        let info = gram_with_weights(x, &weights) * n as f64;
        let step = info
            .cholesky()
            .map(|chol| chol.solve(&u))
            .filter(|s| s.iter().all(|v| v.is_finite()));
        let Some(step) = step else {
            // Information collapses once a separating direction drives every
            // fitted mean onto its label.
            if separation_check && iterations > 0 && classifies_perfectly(model, &eta, y) {
                return Err(GflmError::Separation { norm: beta.norm() });
            }
            return Err(GflmError::RankDeficient);
        };
        let score_norm = u.amax();
        if score_norm <= cfg.tol && step.amax() <= cfg.tol {
            return Ok(ScoringOutcome {
                beta,
                converged: true,
                iterations,
                score_norm,
            });
        }
        if iterations >= cfg.max_iter {
            return Ok(ScoringOutcome {
                beta,
                converged: false,
                iterations,
                score_norm,
            });
        }

        let current = objective(&eta)?;
        let mut t = 1.0;
        let mut candidate = &beta + &step;
        for _ in 0..cfg.max_halvings {
            let value = objective(&(x * &candidate));
            match value {
                Ok(v) if v.is_finite() && v <= current + 1e-12 * current.abs().max(1.0) => break,
                _ => {
                    t *= 0.5;
                    candidate = &beta + &step * t;
                }
            }
        }
        beta = candidate;
        iterations += 1;

        if separation_check {
            let norm = beta.norm();
            if norm > SEPARATION_NORM {
                return Err(GflmError::Separation { norm });
            }
        }
    }
}

fn classifies_perfectly<M: MeanModel>(model: &M, eta: &DVector<f64>, y: &[f64]) -> bool {
    eta.iter()
        .zip(y)
        .all(|(&e, &yi)| (model.mean(e) >= 0.5) == (yi >= 0.5))
}

fn check_design(scores: &ScoreMatrix, y: &[f64]) -> Result<()> {
    let n = scores.n();
    let k = scores.p() + 1;
    if n <= k {
        return Err(GflmError::Precondition(format!(
            "need n > p + 1 observations, have n = {n}, p + 1 = {k}"
        )));
    }
    if let Some(j) = scores
        .matrix()
        .column_iter()
        .position(|c| c.iter().all(|v| *v == 0.0))
    {
        return Err(GflmError::Precondition(format!(
            "score column {j} is identically zero"
        )));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(GflmError::Numeric {
            row: i,
            detail: "response is not finite".into(),
        });
    }
    Ok(())
}

/// Solves `U(β) = 0` for a known link and variance.
///
/// Starts from `β = (g^{-1}(ȳ), 0, .., 0)`. Convergence requires both the
/// largest prospective coefficient change and `‖U‖∞` to be at most `cfg.tol`;
/// hitting `cfg.max_iter` returns the last iterate with `converged = false`.
pub fn iwls_fit(
    scores: &ScoreMatrix,
    y: &[f64],
    link: &LinkSpec,
    cfg: &SolverConfig,
) -> Result<ModelFit> {
    check_dims(scores, y, scores.p() + 1)?;
    check_design(scores, y)?;
    let link = LinkSpec::with_clamp(link.kind, cfg.clamp_eps);
    let x = scores.matrix();
    let n = y.len();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut beta0 = DVector::zeros(x.ncols());
    beta0[0] = link.inverse(ybar);

    let objective = |eta: &DVector<f64>| -> Result<f64> {
        let mut d = 0.0;
        for i in 0..n {
            let mu = link.mean(eta[i]);
            if !mu.is_finite() {
                return Err(GflmError::Numeric {
                    row: i,
                    detail: format!("mean overflow at η = {:.6e}", eta[i]),
                });
            }
            d += link.unit_deviance(y[i], mu);
        }
        Ok(d)
    };
    let outcome = fisher_scoring(
        x,
        y,
        &link,
        beta0,
        cfg,
        objective,
        link.kind.is_binomial(),
    )?;
    finish_fit(scores, y, &link, outcome)
}

fn finish_fit(
    scores: &ScoreMatrix,
    y: &[f64],
    link: &LinkSpec,
    outcome: ScoringOutcome,
) -> Result<ModelFit> {
    let x = scores.matrix();
    let eta = x * &outcome.beta;
    let mu = eta.map(|e| link.mean(e));
    let gamma_tilde = weighted_gram(x, &eta, link)?;
    let deviance = link.deviance(y, mu.as_slice());
    Ok(ModelFit {
        beta: outcome.beta,
        gamma_tilde,
        eta,
        mu,
        converged: outcome.converged,
        iterations: outcome.iterations,
        deviance,
        score_norm: outcome.score_norm,
        intercept: true,
    })
}
