//! Asymptotic chi-square-type inference on the coefficient vector: the
//! standardized quadratic-form statistic, tests of no effect, simultaneous
//! confidence bands for the parameter function, and the information metric.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::Basis;
use crate::curve::{weighted_dot, Curve, FunctionalDataset};
use crate::error::{GflmError, Result};
use crate::glm::ModelFit;

/// Smallest admissible eigenvalue of `Γ` for band construction.
pub const BAND_EIGEN_FLOOR: f64 = 1e-10;
/// Eigenvalues of `Γ` below `-PSD_TOL` are rejected.
pub const PSD_TOL: f64 = 1e-8;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// `Φ^{-1}(p)`.
pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Where the information matrix in a statistic came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaSource {
    Population,
    EmpiricalKnownLink,
    EmpiricalSpqr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub statistic: f64,
    /// `1 − Φ(T)`.
    pub p_value: f64,
    pub dof_terms: usize,
    pub alpha: f64,
    pub critical_value: f64,
    /// `|T| > Φ^{-1}(1 − α)`.
    pub reject: bool,
    pub gamma_used: GammaSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_lower: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_upper: Option<Vec<f64>>,
}

impl InferenceReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| GflmError::InvalidInput(e.to_string()))
    }

    pub fn with_band(mut self, band: &Band) -> Self {
        self.band_lower = Some(band.lower.values().to_vec());
        self.band_upper = Some(band.upper.values().to_vec());
        self
    }
}

fn check_psd(gamma: &DMatrix<f64>) -> Result<()> {
    if !gamma.is_square() {
        return Err(GflmError::Alignment(format!(
            "information matrix is {}×{}",
            gamma.nrows(),
            gamma.ncols()
        )));
    }
    let asym = (gamma - gamma.transpose()).amax();
    if asym > 1e-8 * gamma.amax().max(1.0) {
        return Err(GflmError::InvalidInput(format!(
            "information matrix is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    let min = gamma.symmetric_eigenvalues().min();
    if min < -PSD_TOL {
        return Err(GflmError::InvalidInput(format!(
            "information matrix has negative eigenvalue {min:.3e}"
        )));
    }
    Ok(())
}

/// `T = (n (β̂ − β₀)ᵀ Γ (β̂ − β₀) − q) / √(2q)`, where `q = p + 1` or, with
/// the intercept excluded, `q = p` and the first row and column of `Γ` are
/// dropped.
pub fn test_statistic(
    beta_hat: &DVector<f64>,
    beta_0: &DVector<f64>,
    gamma: &DMatrix<f64>,
    n: usize,
    include_intercept: bool,
) -> Result<f64> {
    let k = beta_hat.len();
    if beta_0.len() != k || gamma.nrows() != k {
        return Err(GflmError::Alignment(format!(
            "coefficient lengths {} and {} with a {}×{} information matrix",
            k,
            beta_0.len(),
            gamma.nrows(),
            gamma.ncols()
        )));
    }
    check_psd(gamma)?;
    let start = usize::from(!include_intercept);
    let q = k - start;
    if q == 0 {
        return Err(GflmError::Range("no coefficients left to test".into()));
    }
    let d = (beta_hat - beta_0).rows(start, q).into_owned();
    let g = gamma.view((start, start), (q, q));
    let form = (d.transpose() * g * &d)[(0, 0)];
    let q = q as f64;
    Ok((n as f64 * form - q) / (2.0 * q).sqrt())
}

/// Tests `β_1 = .. = β_p = 0` with the intercept excluded; rejects when
/// `|T| > Φ^{-1}(1 − α)`.
pub fn no_effect_test(fit: &ModelFit, alpha: f64, source: GammaSource) -> Result<InferenceReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GflmError::Range(format!("alpha = {alpha} outside (0, 1)")));
    }
    if !fit.converged {
        return Err(GflmError::Precondition("fit did not converge".into()));
    }
    let beta_0 = DVector::zeros(fit.beta.len());
    let statistic = test_statistic(&fit.beta, &beta_0, &fit.gamma_tilde, fit.n(), false)?;
    let critical_value = normal_quantile(1.0 - alpha);
    Ok(InferenceReport {
        statistic,
        p_value: 1.0 - normal_cdf(statistic),
        dof_terms: fit.p(),
        alpha,
        critical_value,
        reject: statistic.abs() > critical_value,
        gamma_used: source,
        band_lower: None,
        band_upper: None,
    })
}

/// Radius `c(α) = [q + √(2q) Φ^{-1}(1 − α)] / n` of the confidence ellipsoid
/// `(β̂ − β)ᵀ Γ (β̂ − β) ≤ c(α)`.
pub fn critical_radius(q: usize, n: usize, alpha: f64) -> f64 {
    let q = q as f64;
    (q + (2.0 * q).sqrt() * normal_quantile(1.0 - alpha)) / n as f64
}

/// Simultaneous band around `θ̂(t) = β̂_0 + Σ_j β̂_j ρ_j(t)`.
///
/// For fits without an intercept the band is around `Σ_j β̂_j ρ_j(t)` and
/// only the slope block of `Γ` enters.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub center: Curve,
    pub lower: Curve,
    pub upper: Curve,
    pub half_width: Vec<f64>,
    pub c_alpha: f64,
}

impl Band {
    /// CSV with columns `t, lower, upper`.
    pub fn write_csv<W: Write>(&self, writer: W, basis: &Basis) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["t", "lower", "upper"])?;
        for (k, t) in basis.grid().points().iter().enumerate() {
            wtr.write_record([
                t.to_string(),
                self.lower.values()[k].to_string(),
                self.upper.values()[k].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn covers(&self, truth: &Curve) -> bool {
        truth
            .values()
            .iter()
            .zip(self.lower.values().iter().zip(self.upper.values()))
            .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }
}

/// Builds the band from the eigendecomposition `(e_k, λ_k)` of `Γ`:
/// half-width `√(c(α) Σ_k ω_k(t)² / λ_k)` with `ω_k(t) = Σ_l ρ_l(t) e_kl`
/// and `ρ_0 ≡ 1`.
pub fn simultaneous_band(fit: &ModelFit, basis: &Basis, alpha: f64) -> Result<Band> {
    band_with_gamma(&fit.beta, &fit.gamma_tilde, fit.n(), fit.intercept, basis, alpha)
}

pub fn band_with_gamma(
    beta: &DVector<f64>,
    gamma: &DMatrix<f64>,
    n: usize,
    intercept: bool,
    basis: &Basis,
    alpha: f64,
) -> Result<Band> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GflmError::Range(format!("alpha = {alpha} outside (0, 1)")));
    }
    let p = beta.len() - 1;
    if gamma.nrows() != p + 1 || gamma.ncols() != p + 1 {
        return Err(GflmError::Alignment(format!(
            "{} coefficients with a {}×{} information matrix",
            p + 1,
            gamma.nrows(),
            gamma.ncols()
        )));
    }
    if p > basis.len() {
        return Err(GflmError::Range(format!("p = {p} exceeds {} basis functions", basis.len())));
    }
    let start = usize::from(!intercept);
    let q = p + 1 - start;
    let g = gamma.view((start, start), (q, q)).into_owned();
    let eig = SymmetricEigen::new(g);
    if let Some((index, &lambda)) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .find(|(_, &l)| l <= BAND_EIGEN_FLOOR)
    {
        return Err(GflmError::Conditioning { index, lambda });
    }
    let c_alpha = critical_radius(q, n, alpha);

    let m = basis.grid().len();
    let rho = basis.value_matrix();
    // Columns of `r` are (ρ_0, ρ_1, .., ρ_p) restricted to the tested block.
    let r = DMatrix::from_fn(m, q, |a, col| {
        let l = col + start;
        if l == 0 {
            1.0
        } else {
            rho[(a, l - 1)]
        }
    });
    let omega = &r * &eig.eigenvectors;
    let coef = beta.rows(start, q);
    let center = &r * coef;
    let half_width: Vec<f64> = (0..m)
        .map(|a| {
            let s: f64 = (0..q).map(|k| omega[(a, k)].powi(2) / eig.eigenvalues[k]).sum();
            (c_alpha * s).sqrt()
        })
        .collect();
    let lower = center.iter().zip(&half_width).map(|(c, h)| c - h).collect();
    let upper = center.iter().zip(&half_width).map(|(c, h)| c + h).collect();
    Ok(Band {
        center: Curve::new(center.iter().copied().collect())?,
        lower: Curve::new(lower)?,
        upper: Curve::new(upper)?,
        half_width,
        c_alpha,
    })
}

/// Coefficients `(a, ∫ f ρ_1 dw, .., ∫ f ρ_p dw)` of `(a, f)`.
pub fn project_function(intercept: f64, f: &Curve, basis: &Basis, p: usize) -> Result<DVector<f64>> {
    if p > basis.len() {
        return Err(GflmError::Range(format!("p = {p} exceeds {} basis functions", basis.len())));
    }
    if f.len() != basis.grid().len() {
        return Err(GflmError::Alignment(format!(
            "curve has {} values, grid has {}",
            f.len(),
            basis.grid().len()
        )));
    }
    let q = basis.weight().quadrature_weights(basis.grid())?;
    let mut out = DVector::zeros(p + 1);
    out[0] = intercept;
    for (j, rho) in basis.functions().iter().take(p).enumerate() {
        out[j + 1] = weighted_dot(&q, f.values(), rho.values());
    }
    Ok(out)
}

/// Squared information distance `(f − g)ᵀ Γ (f − g)` between `(a, f)` and
/// `(b, g)` after projecting onto the first `p = dim Γ − 1` basis functions.
pub fn dg_distance_squared(
    f: (f64, &Curve),
    g: (f64, &Curve),
    gamma: &DMatrix<f64>,
    basis: &Basis,
) -> Result<f64> {
    check_psd(gamma)?;
    let p = gamma.nrows() - 1;
    let d = project_function(f.0, f.1, basis, p)? - project_function(g.0, g.1, basis, p)?;
    Ok((d.transpose() * gamma * &d)[(0, 0)].max(0.0))
}

/// Plug-in kernel `Ĝ(s, t) = (1/n) Σ_i w_i X_i(s) X_i(t)` with
/// `w_i = g′²(η_i)/σ²(μ_i)`.
pub fn g_kernel(ds: &FunctionalDataset, weights: &[f64]) -> Result<DMatrix<f64>> {
    if weights.len() != ds.len() {
        return Err(GflmError::Alignment(format!(
            "{} weights for {} curves",
            weights.len(),
            ds.len()
        )));
    }
    let x = ds.curve_matrix();
    let mut scaled = x.clone();
    for (mut row, w) in scaled.row_iter_mut().zip(weights) {
        row.scale_mut(*w);
    }
    let mut k = x.transpose() * scaled / ds.len() as f64;
    let m = k.nrows();
    for a in 0..m {
        for b in a + 1..m {
            let avg = 0.5 * (k[(a, b)] + k[(b, a)]);
            k[(a, b)] = avg;
            k[(b, a)] = avg;
        }
    }
    Ok(k)
}

/// Cross-moment matrix `(1/n) Σ_i ε^G_i ε^Gᵀ_i` of the weighted scores
/// `ε^G_ij = √w_i ∫ X_i ρ_j dw` in `basis`.
pub fn eigen_score_diagnostic(ds: &FunctionalDataset, weights: &[f64], basis: &Basis) -> Result<DMatrix<f64>> {
    let e = weighted_scores(ds, weights, basis)?;
    let mut m = e.transpose() * &e / ds.len() as f64;
    let j = m.nrows();
    for a in 0..j {
        for b in a + 1..j {
            let avg = 0.5 * (m[(a, b)] + m[(b, a)]);
            m[(a, b)] = avg;
            m[(b, a)] = avg;
        }
    }
    Ok(m)
}

/// Rows are `ε^G_i`.
pub fn weighted_scores(ds: &FunctionalDataset, weights: &[f64], basis: &Basis) -> Result<DMatrix<f64>> {
    if weights.len() != ds.len() {
        return Err(GflmError::Alignment(format!(
            "{} weights for {} curves",
            weights.len(),
            ds.len()
        )));
    }
    if let Some(i) = weights.iter().position(|w| !(*w >= 0.0)) {
        return Err(GflmError::InvalidInput(format!("weight {i} is negative or not finite")));
    }
    let q = ds.weight().quadrature_weights(ds.grid())?;
    let mut x = ds.curve_matrix();
    for (mut col, w) in x.column_iter_mut().zip(&q) {
        col.scale_mut(*w);
    }
    let mut e = x * basis.value_matrix();
    for (mut row, w) in e.row_iter_mut().zip(weights) {
        row.scale_mut(w.sqrt());
    }
    Ok(e)
}

/// Kolmogorov distance `sup_x |F_n(x) − Φ(x)|`.
pub fn ks_distance_to_normal(sample: &[f64]) -> f64 {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            (f - i as f64 / n).abs().max((((i + 1) as f64) / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Pairs `(Φ^{-1}((i − ½)/n), x_(i))` for a normal QQ plot.
pub fn normal_qq(sample: &[f64]) -> Vec<(f64, f64)> {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter()
        .enumerate()
        .map(|(i, x)| (normal_quantile((i as f64 + 0.5) / n), x))
        .collect()
}
