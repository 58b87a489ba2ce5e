//! Semiparametric quasi-likelihood regression: the link, its derivative and
//! the variance function are estimated by kernel smoothing, alternating with
//! score-equation updates of a unit-norm slope vector.
//!
//! No intercept is estimated; location is absorbed by the estimated link.
//! The norm constraint applies to the slope coefficients only.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::ScoreMatrix;
use crate::curve::interpolate;
use crate::error::{GflmError, Result};
use crate::glm::{fisher_scoring, gram_with_weights, iwls_fit, score_vector, ModelFit, SolverConfig};
use crate::link::{LinkSpec, MeanModel};
use crate::par::Execution;
use crate::smooth::{isotonic_increasing, local_constant, smooth_with_support, Kernel, SmootherConfig};

/// Floor on the estimated link derivative.
pub const DERIV_FLOOR: f64 = 1e-6;
/// Variance floor as a fraction of the mean squared residual.
pub const VARIANCE_FLOOR_FRACTION: f64 = 0.05;
/// The derivative bandwidth is `DERIV_BANDWIDTH_FACTOR · h · n^{1/5 − 1/7}`.
pub const DERIV_BANDWIDTH_EXPONENT: f64 = 0.2 - 1.0 / 7.0;
pub const DERIV_BANDWIDTH_FACTOR: f64 = 2.0;
pub const MIN_SUPPORT: usize = 10;
pub const MIN_SUPPORT_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpqrConfig {
    /// Fixed bandwidth on the linear-predictor axis; `None` uses
    /// `1.2 · sd(η̂) · n^{-1/5}` recomputed at every outer step.
    pub bandwidth: Option<f64>,
    pub degree: usize,
    pub kernel: Kernel,
    pub max_outer: usize,
    /// Outer stopping rule on `‖β̂_new − β̂_old‖₂`.
    pub tol: f64,
    pub grid_points: usize,
    pub solver: SolverConfig,
    pub execution: Execution,
}

impl Default for SpqrConfig {
    fn default() -> Self {
        Self {
            bandwidth: None,
            degree: 1,
            kernel: Kernel::Epanechnikov,
            max_outer: 25,
            tol: 1e-5,
            grid_points: 201,
            solver: SolverConfig {
                max_iter: 50,
                ..SolverConfig::default()
            },
            execution: Execution::Sequential,
        }
    }
}

impl SpqrConfig {
    pub fn with_bandwidth(mut self, h: f64) -> Self {
        self.bandwidth = Some(h);
        self
    }

    fn smoother(&self, h: f64) -> Result<SmootherConfig> {
        SmootherConfig::new(h, self.degree, self.kernel)
    }
}

/// Rule-of-thumb bandwidth `1.2 · sd(η̂) · n^{-1/5}`.
pub fn default_bandwidth(eta: &[f64]) -> f64 {
    let n = eta.len() as f64;
    1.2 * sample_sd(eta) * n.powf(-0.2)
}

/// Fewest observations a smoothing window may hold before it is widened.
pub fn min_local_support(n: usize) -> usize {
    ((MIN_SUPPORT_FRACTION * n as f64).ceil() as usize).max(MIN_SUPPORT)
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

/// Estimated link `ĝ`, derivative `ĝ′` and variance `σ̂²(ĝ(·))` tabulated on
/// an equispaced grid of linear-predictor values; linear interpolation
/// inside, flat extrapolation outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkEstimate {
    pub eval_grid: Vec<f64>,
    pub g_hat: Vec<f64>,
    pub g_prime_hat: Vec<f64>,
    pub sigma2_hat: Vec<f64>,
    pub variance_floor: f64,
    /// Grid points where the smoothed variance was raised to the floor.
    pub floored: usize,
    /// Grid points where the variance was smoothed against `η̂` instead of
    /// `μ̂` because `ĝ` is flat there.
    pub variance_on_eta: usize,
}

impl LinkEstimate {
    pub fn is_monotone(&self) -> bool {
        self.g_hat.windows(2).all(|w| w[1] >= w[0])
    }

    /// `ĝ^{-1}(y)`, clamped to the grid range.
    pub fn inverse(&self, y: f64) -> f64 {
        let g = &self.g_hat;
        let last = g.len() - 1;
        if y <= g[0] {
            return self.eval_grid[0];
        }
        if y >= g[last] {
            return self.eval_grid[last];
        }
        let k = g.partition_point(|&v| v < y);
        let (g0, g1) = (g[k - 1], g[k]);
        let (e0, e1) = (self.eval_grid[k - 1], self.eval_grid[k]);
        if g1 > g0 {
            e0 + (y - g0) / (g1 - g0) * (e1 - e0)
        } else {
            e0
        }
    }

    /// CSV with columns `eta, g, g_prime, sigma2`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["eta", "g", "g_prime", "sigma2"])?;
        for k in 0..self.eval_grid.len() {
            wtr.write_record([
                format!("{}", self.eval_grid[k]),
                format!("{}", self.g_hat[k]),
                format!("{}", self.g_prime_hat[k]),
                format!("{}", self.sigma2_hat[k]),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl MeanModel for LinkEstimate {
    fn mean(&self, eta: f64) -> f64 {
        interpolate(&self.eval_grid, &self.g_hat, eta)
    }

    fn mean_deriv(&self, eta: f64) -> f64 {
        interpolate(&self.eval_grid, &self.g_prime_hat, eta)
    }

    fn variance_at(&self, eta: f64) -> f64 {
        interpolate(&self.eval_grid, &self.sigma2_hat, eta).max(self.variance_floor)
    }
}

/// Local polynomial fit, replaced by the local mean wherever it leaves the
/// range of the responses.
fn bounded_level(
    x: &[f64],
    y: &[f64],
    at: &[f64],
    smoother: &SmootherConfig,
    exec: Execution,
    support: usize,
) -> Result<Vec<f64>> {
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw = smooth_with_support(x, y, at, smoother, 0, exec, support)?;
    if raw.iter().all(|&v| (lo..=hi).contains(&v)) {
        return Ok(raw);
    }
    let fallback = local_constant(x, y, at, smoother, exec, support)?;
    Ok(raw
        .into_iter()
        .zip(fallback)
        .map(|(r, f)| if (lo..=hi).contains(&r) { r } else { f })
        .collect())
}

/// Smooths `(η̂_i, Y_i)` for `ĝ, ĝ′` and `(μ̂_i, (Y_i − μ̂_i)²)` for `σ̂²`.
pub fn estimate_link(eta: &[f64], y: &[f64], h: f64, cfg: &SpqrConfig) -> Result<LinkEstimate> {
    let n = eta.len();
    let smoother = cfg.smoother(h)?;
    let lo = eta.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(GflmError::DegenerateLink { range: 0.0 });
    }
    let support = min_local_support(n);
    let m = cfg.grid_points.max(2);
    let grid: Vec<f64> = (0..m)
        .map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64)
        .collect();

    let y_lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let y_hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = bounded_level(eta, y, &grid, &smoother, cfg.execution, support)?;
    let g_hat = isotonic_increasing(&level);
    let range = g_hat[m - 1] - g_hat[0];
    if !(range > 1e-8 * (y_hi - y_lo).max(1.0)) {
        return Err(GflmError::DegenerateLink { range });
    }
    // Derivatives and squared residuals are noisier; widen the window to the
    // derivative rate.
    let wide = cfg.smoother(DERIV_BANDWIDTH_FACTOR * h * (n as f64).powf(DERIV_BANDWIDTH_EXPONENT))?;
    let g_prime_hat: Vec<f64> = smooth_with_support(eta, y, &grid, &wide, 1, cfg.execution, support)?
        .into_iter()
        .map(|d| d.max(DERIV_FLOOR))
        .collect();

    let mu: Vec<f64> = eta.iter().map(|&e| interpolate(&grid, &g_hat, e)).collect();
    let sq: Vec<f64> = mu.iter().zip(y).map(|(m, y)| (y - m).powi(2)).collect();
    let mean_sq = sq.iter().sum::<f64>() / n as f64;
    let variance_floor = (VARIANCE_FLOOR_FRACTION * mean_sq).max(1e-12);

    // Smooth on μ̂ where ĝ is strictly increasing; inside flat stretches μ̂ is
    // tied and the regression runs on η̂ instead.
    let flat: Vec<bool> = (0..m)
        .map(|k| {
            let left = k > 0 && g_hat[k - 1] == g_hat[k];
            let right = k + 1 < m && g_hat[k + 1] == g_hat[k];
            left || right
        })
        .collect();
    let on_eta = bounded_level(eta, &sq, &grid, &wide, cfg.execution, support)?;
    let mu_sd = sample_sd(&mu);
    let on_mu = if mu_sd > 1e-8 {
        let h_mu = wide.bandwidth * mu_sd / sample_sd(eta);
        SmootherConfig::new(h_mu, cfg.degree, cfg.kernel)
            .and_then(|s| bounded_level(&mu, &sq, &g_hat, &s, cfg.execution, support))
            .ok()
    } else {
        None
    };
    let (raw_var, variance_on_eta) = match on_mu {
        Some(v) => {
            let mixed: Vec<f64> = (0..m).map(|k| if flat[k] { on_eta[k] } else { v[k] }).collect();
            (mixed, flat.iter().filter(|&&f| f).count())
        }
        None => (on_eta, m),
    };
    let mut floored = 0;
    let sigma2_hat = raw_var
        .into_iter()
        .map(|v| {
            if v < variance_floor {
                floored += 1;
                variance_floor
            } else {
                v
            }
        })
        .collect();
    Ok(LinkEstimate {
        eval_grid: grid,
        g_hat,
        g_prime_hat,
        sigma2_hat,
        variance_floor,
        floored,
        variance_on_eta,
    })
}

/// `γ̂_kl = (1/n) Σ_i ĝ′²(η̂_i)/σ̂²(η̂_i) · ε_k^{(i)} ε_l^{(i)}` over all score
/// columns, with the number of observations whose variance sat at the floor.
pub fn gamma_hat(scores: &ScoreMatrix, eta_hat: &[f64], link_est: &LinkEstimate) -> Result<(DMatrix<f64>, usize)> {
    if scores.n() != eta_hat.len() {
        return Err(GflmError::Alignment(format!(
            "{} score rows but {} predictors",
            scores.n(),
            eta_hat.len()
        )));
    }
    let mut floored = 0;
    let weights: Vec<f64> = eta_hat
        .iter()
        .map(|&e| {
            let raw = interpolate(&link_est.eval_grid, &link_est.sigma2_hat, e);
            if raw <= link_est.variance_floor {
                floored += 1;
            }
            let var = raw.max(link_est.variance_floor);
            let d = link_est.mean_deriv(e);
            d * d / var
        })
        .collect();
    Ok((gram_with_weights(scores.matrix(), &weights), floored))
}

/// Per-outer-iteration record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpqrIterate {
    pub bandwidth: f64,
    /// `‖β̂‖₂` after renormalization.
    pub beta_norm: f64,
    pub link_monotone: bool,
    /// `‖β̂_new − β̂_old‖₂`.
    pub change: f64,
    /// Inner product of successive iterates.
    pub alignment: f64,
}

#[derive(Debug, Clone)]
pub struct SpqrFit {
    /// `beta[0]` is 0 (no intercept); `gamma_tilde` holds `Γ̂`.
    pub fit: ModelFit,
    pub link: LinkEstimate,
    /// Bandwidth used for the final link estimate.
    pub bandwidth: f64,
    pub history: Vec<SpqrIterate>,
}

impl SpqrFit {
    /// Unit-norm slope vector.
    pub fn direction(&self) -> DVector<f64> {
        self.fit.beta.rows(1, self.fit.p()).into_owned()
    }
}

fn normalize(v: DVector<f64>) -> Result<DVector<f64>> {
    let norm = v.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(GflmError::DegenerateLink { range: 0.0 });
    }
    Ok(v / norm)
}

/// Alternates link/variance smoothing with score updates until the unit-norm
/// slope vector moves by at most `cfg.tol` or `cfg.max_outer` steps elapse.
/// The initial direction comes from a parametric fit with `init_link`.
pub fn spqr_fit(scores: &ScoreMatrix, y: &[f64], cfg: &SpqrConfig, init_link: &LinkSpec) -> Result<SpqrFit> {
    if y.len() != scores.n() {
        return Err(GflmError::Alignment(format!(
            "{} score rows but {} responses",
            scores.n(),
            y.len()
        )));
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(GflmError::Precondition("responses are all equal".into()));
    }
    let slopes = scores.slopes();
    let p = scores.p();

    let init = iwls_fit(scores, y, init_link, &cfg.solver)?;
    let mut beta = normalize(init.beta.rows(1, p).into_owned())?;
    let mut history = Vec::new();
    let mut converged = false;
    let mut best: Option<(f64, DVector<f64>)> = None;

    for _ in 0..cfg.max_outer {
        let eta = &slopes * &beta;
        let h = cfg.bandwidth.unwrap_or_else(|| default_bandwidth(eta.as_slice()));
        let link = estimate_link(eta.as_slice(), y, h, cfg)?;

        // Merit for step halving: squared norm of the semiparametric score.
        let objective = |e: &DVector<f64>| -> Result<f64> {
            let resid = DVector::from_iterator(
                e.len(),
                e.iter()
                    .zip(y)
                    .map(|(&e, &yi)| (yi - link.mean(e)) * link.mean_deriv(e) / link.variance_at(e)),
            );
            Ok((slopes.transpose() * resid).norm_squared())
        };
        let outcome = fisher_scoring(&slopes, y, &link, beta.clone(), &cfg.solver, objective, false)?;
        let mut next = normalize(outcome.beta)?;
        let mut alignment = next.dot(&beta);
        if alignment < 0.0 {
            next = -next;
            alignment = -alignment;
        }
        let change = (&next - &beta).norm();
        history.push(SpqrIterate {
            bandwidth: h,
            beta_norm: next.norm(),
            link_monotone: link.is_monotone(),
            change,
            alignment,
        });
        if best.as_ref().is_none_or(|(c, _)| change < *c) {
            best = Some((change, next.clone()));
        }
        beta = next;
        if change <= cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        if let Some((_, b)) = best {
            beta = b;
        }
    }

    let eta = &slopes * &beta;
    let h = cfg.bandwidth.unwrap_or_else(|| default_bandwidth(eta.as_slice()));
    let link = estimate_link(eta.as_slice(), y, h, cfg)?;
    let mu = eta.map(|e| link.mean(e));
    let (gamma, _) = gamma_hat(scores, eta.as_slice(), &link)?;
    let deviance = quasi_deviance(y, eta.as_slice(), &link);
    let mut full = DVector::zeros(p + 1);
    full.rows_mut(1, p).copy_from(&beta);
    let u = score_vector(&full, scores, y, &link)?;
    let score_norm = u.rows(1, p).amax();
    let iterations = history.len();
    Ok(SpqrFit {
        fit: ModelFit {
            beta: full,
            gamma_tilde: gamma,
            eta,
            mu,
            converged,
            iterations,
            deviance,
            score_norm,
            intercept: false,
        },
        link,
        bandwidth: h,
        history,
    })
}

/// Quasi-deviance `2 Σ_i ∫_{η̂_i}^{ĝ^{-1}(Y_i)} (Y_i − ĝ(s)) ĝ′(s) / σ̂²(s) ds`,
/// integrated by the trapezoid rule through the link's evaluation grid.
pub fn quasi_deviance(y: &[f64], eta: &[f64], link: &LinkEstimate) -> f64 {
    let grid = &link.eval_grid;
    let integrand = |yi: f64, s: f64| (yi - link.mean(s)) * link.mean_deriv(s) / link.variance_at(s);
    let mut total = 0.0;
    for (&yi, &ei) in y.iter().zip(eta) {
        let sat = link.inverse(yi);
        let (a, b, sign) = if sat >= ei { (ei, sat, 1.0) } else { (sat, ei, -1.0) };
        if b <= a {
            continue;
        }
        let mut nodes = vec![a];
        let start = grid.partition_point(|&g| g <= a);
        nodes.extend(grid[start..].iter().copied().take_while(|&g| g < b));
        nodes.push(b);
        let mut acc = 0.0;
        let mut prev = integrand(yi, nodes[0]);
        for w in nodes.windows(2) {
            let next = integrand(yi, w[1]);
            acc += 0.5 * (w[1] - w[0]) * (prev + next);
            prev = next;
        }
        total += 2.0 * sign * acc;
    }
    total.max(0.0)
}
