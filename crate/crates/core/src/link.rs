//! Link and variance functions.
//!
//! Links follow the convention `μ = g(η)`: `g` maps the linear predictor to
//! the mean, so the "logit" link is the logistic function.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GflmError, Result};

/// Default clamp keeping binomial means inside `(0, 1)` and Poisson means positive.
pub const DEFAULT_CLAMP: f64 = 1e-10;

/// Mean function, its derivative and the conditional variance, all as
/// functions of the linear predictor. Implemented by the parametric links and
/// by nonparametric link estimates.
pub trait MeanModel {
    fn mean(&self, eta: f64) -> f64;
    fn mean_deriv(&self, eta: f64) -> f64;
    /// `σ²(g(η))`.
    fn variance_at(&self, eta: f64) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    /// `g(x) = exp(x) / (1 + exp(x))`, `σ²(μ) = μ(1 − μ)`.
    Logit,
    /// `g(x) = exp(−exp(−x))`, `σ²(μ) = μ(1 − μ)`.
    Cloglog,
    /// `g(x) = x`, `σ² ≡ 1`.
    Identity,
    /// `g(x) = exp(x)`, `σ²(μ) = μ`.
    Log,
}

impl LinkKind {
    pub fn is_binomial(self) -> bool {
        matches!(self, LinkKind::Logit | LinkKind::Cloglog)
    }
}

impl fmt::Display for LinkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LinkKind::Logit => "logit",
            LinkKind::Cloglog => "cloglog",
            LinkKind::Identity => "identity",
            LinkKind::Log => "log",
        };
        f.write_str(name)
    }
}

impl FromStr for LinkKind {
    type Err = GflmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logit" => Ok(LinkKind::Logit),
            "cloglog" | "c-loglog" => Ok(LinkKind::Cloglog),
            "identity" => Ok(LinkKind::Identity),
            "log" => Ok(LinkKind::Log),
            other => Err(GflmError::Config(format!("unknown link {other:?}"))),
        }
    }
}

/// A fully specified link with its variance function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub kind: LinkKind,
    /// Means are clipped to `[clamp, 1 − clamp]` (binomial) or `[clamp, ∞)`
    /// (Poisson) before the variance is evaluated.
    pub clamp: f64,
}

impl LinkSpec {
    pub fn new(kind: LinkKind) -> Self {
        Self {
            kind,
            clamp: DEFAULT_CLAMP,
        }
    }

    pub fn with_clamp(kind: LinkKind, clamp: f64) -> Self {
        Self { kind, clamp }
    }

    pub fn logit() -> Self {
        Self::new(LinkKind::Logit)
    }

    pub fn cloglog() -> Self {
        Self::new(LinkKind::Cloglog)
    }

    pub fn identity() -> Self {
        Self::new(LinkKind::Identity)
    }

    pub fn log() -> Self {
        Self::new(LinkKind::Log)
    }

    fn clamp_mean(&self, mu: f64) -> f64 {
        match self.kind {
            LinkKind::Logit | LinkKind::Cloglog => mu.clamp(self.clamp, 1.0 - self.clamp),
            LinkKind::Log => mu.max(self.clamp),
            LinkKind::Identity => mu,
        }
    }

    /// `σ²(μ)` after clamping, so always at least of order `clamp`.
    pub fn variance(&self, mu: f64) -> f64 {
        match self.kind {
            LinkKind::Logit | LinkKind::Cloglog => {
                let m = self.clamp_mean(mu);
                m * (1.0 - m)
            }
            LinkKind::Log => self.clamp_mean(mu),
            LinkKind::Identity => 1.0,
        }
    }

    /// `g^{-1}(μ)`, with `μ` clamped into the invertible range.
    pub fn inverse(&self, mu: f64) -> f64 {
        let m = self.clamp_mean(mu);
        match self.kind {
            LinkKind::Logit => (m / (1.0 - m)).ln(),
            LinkKind::Cloglog => -(-m.ln()).ln(),
            LinkKind::Log => m.ln(),
            LinkKind::Identity => m,
        }
    }

    /// Deviance contribution `2 [ℓ(y; y) − ℓ(y; μ)]` of one observation under
    /// the quasi-likelihood implied by the variance function.
    pub fn unit_deviance(&self, y: f64, mu: f64) -> f64 {
        match self.kind {
            LinkKind::Logit | LinkKind::Cloglog => {
                let m = self.clamp_mean(mu);
                2.0 * (xlogy(y, y / m) + xlogy(1.0 - y, (1.0 - y) / (1.0 - m)))
            }
            LinkKind::Log => {
                let m = self.clamp_mean(mu);
                2.0 * (xlogy(y, y / m) - (y - m))
            }
            LinkKind::Identity => (y - mu) * (y - mu),
        }
    }

    pub fn deviance(&self, y: &[f64], mu: &[f64]) -> f64 {
        y.iter()
            .zip(mu)
            .map(|(&y, &m)| self.unit_deviance(y, m))
            .sum::<f64>()
            .max(0.0)
    }
}

/// `x ln(r)` with the convention `0 ln(·) = 0`.
fn xlogy(x: f64, r: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * r.ln()
    }
}

impl MeanModel for LinkSpec {
    fn mean(&self, eta: f64) -> f64 {
        match self.kind {
            LinkKind::Logit => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
            LinkKind::Cloglog => (-(-eta).exp()).exp(),
            LinkKind::Identity => eta,
            LinkKind::Log => eta.exp(),
        }
    }

    fn mean_deriv(&self, eta: f64) -> f64 {
        match self.kind {
            LinkKind::Logit => {
                let e = (-eta.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            LinkKind::Cloglog => (-eta - (-eta).exp()).exp(),
            LinkKind::Identity => 1.0,
            LinkKind::Log => eta.exp(),
        }
    }

    fn variance_at(&self, eta: f64) -> f64 {
        self.variance(self.mean(eta))
    }
}
