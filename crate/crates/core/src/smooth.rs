//! Local polynomial kernel smoothing with derivative estimation, and
//! pool-adjacent-violators monotonization.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GflmError, Result};
use crate::par::{map_slice, Execution};

/// Times the bandwidth is doubled at a point with too little local data.
pub const MAX_BANDWIDTH_DOUBLINGS: usize = 5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Epanechnikov,
    Gaussian,
}

impl Kernel {
    fn weight(self, z: f64) -> f64 {
        match self {
            Kernel::Epanechnikov => {
                if z.abs() < 1.0 {
                    0.75 * (1.0 - z * z)
                } else {
                    0.0
                }
            }
            Kernel::Gaussian => (-0.5 * z * z).exp(),
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Epanechnikov => "epanechnikov",
            Kernel::Gaussian => "gaussian",
        })
    }
}

impl FromStr for Kernel {
    type Err = GflmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epanechnikov" => Ok(Kernel::Epanechnikov),
            "gaussian" => Ok(Kernel::Gaussian),
            other => Err(GflmError::Config(format!("unknown kernel {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmootherConfig {
    /// Half-width of the kernel window, in units of the smoothed axis.
    pub bandwidth: f64,
    /// 1 (local linear) or 2 (local quadratic).
    pub degree: usize,
    pub kernel: Kernel,
}

impl SmootherConfig {
    pub fn new(bandwidth: f64, degree: usize, kernel: Kernel) -> Result<Self> {
        let cfg = Self {
            bandwidth,
            degree,
            kernel,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn local_linear(bandwidth: f64) -> Result<Self> {
        Self::new(bandwidth, 1, Kernel::Epanechnikov)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(GflmError::Config(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        if !(1..=2).contains(&self.degree) {
            return Err(GflmError::Config(format!(
                "local polynomial degree must be 1 or 2, got {}",
                self.degree
            )));
        }
        Ok(())
    }
}

/// Fit at one point; `None` when the local design is too thin or singular.
fn fit_at(
    x: &[f64],
    y: &[f64],
    x0: f64,
    h: f64,
    degree: usize,
    kernel: Kernel,
    min_support: usize,
) -> Option<[f64; 2]> {
    let d = degree + 1;
    let mut moments = [0.0f64; 5];
    let mut rhs = [0.0f64; 3];
    let mut support = 0usize;
    for (&xi, &yi) in x.iter().zip(y) {
        let z = (xi - x0) / h;
        let w = kernel.weight(z);
        if w <= 0.0 {
            continue;
        }
        support += 1;
        let mut zk = 1.0;
        for m in moments.iter_mut().take(2 * degree + 1) {
            *m += w * zk;
            zk *= z;
        }
        let mut zk = 1.0;
        for r in rhs.iter_mut().take(d) {
            *r += w * zk * yi;
            zk *= z;
        }
    }
    if support < d.max(min_support) {
        return None;
    }
    let a = DMatrix::from_fn(d, d, |r, c| moments[r + c]);
    let b = DVector::from_fn(d, |r, _| rhs[r]);
    // Reject numerically singular designs (e.g. all support points tied).
    let diag_min = (0..d).map(|k| a[(k, k)]).fold(f64::INFINITY, f64::min);
    let chol = a.clone().cholesky()?;
    let l = chol.l();
    let pivot_min = (0..d).map(|k| l[(k, k)] * l[(k, k)]).fold(f64::INFINITY, f64::min);
    if !(pivot_min > 1e-12 * diag_min.max(f64::MIN_POSITIVE)) {
        return None;
    }
    let coef = chol.solve(&b);
    Some([coef[0], if d > 1 { coef[1] / h } else { 0.0 }])
}

/// Local polynomial regression of `y` on `x`, evaluated at `at`.
///
/// Returns fitted values (`deriv = 0`) or fitted first derivatives
/// (`deriv = 1`). Where fewer than `degree + 1` points carry positive kernel
/// weight, the bandwidth is doubled up to [`MAX_BANDWIDTH_DOUBLINGS`] times.
pub fn local_poly_smooth(
    x: &[f64],
    y: &[f64],
    at: &[f64],
    cfg: &SmootherConfig,
    deriv: usize,
) -> Result<Vec<f64>> {
    local_poly_smooth_with(x, y, at, cfg, deriv, Execution::Sequential)
}

/// [`local_poly_smooth`] with evaluation points spread over threads.
pub fn local_poly_smooth_with(
    x: &[f64],
    y: &[f64],
    at: &[f64],
    cfg: &SmootherConfig,
    deriv: usize,
    exec: Execution,
) -> Result<Vec<f64>> {
    smooth_with_support(x, y, at, cfg, deriv, exec, cfg.degree + 1)
}

/// Inflates the bandwidth until at least `min_support` points carry weight.
pub(crate) fn smooth_with_support(
    x: &[f64],
    y: &[f64],
    at: &[f64],
    cfg: &SmootherConfig,
    deriv: usize,
    exec: Execution,
    min_support: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(GflmError::Alignment(format!(
            "{} abscissae but {} responses",
            x.len(),
            y.len()
        )));
    }
    if deriv > 1 {
        return Err(GflmError::InvalidInput(format!(
            "derivative order {deriv} not supported"
        )));
    }
    if x.iter().chain(y).chain(at).any(|v| !v.is_finite()) {
        return Err(GflmError::InvalidInput("smoother inputs must be finite".into()));
    }
    sweep(x, y, at, cfg, cfg.degree, deriv, exec, min_support)
}

/// Kernel-weighted local mean; stays inside the range of the local responses.
pub(crate) fn local_constant(
    x: &[f64],
    y: &[f64],
    at: &[f64],
    cfg: &SmootherConfig,
    exec: Execution,
    min_support: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    sweep(x, y, at, cfg, 0, 0, exec, min_support)
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    x: &[f64],
    y: &[f64],
    at: &[f64],
    cfg: &SmootherConfig,
    degree: usize,
    deriv: usize,
    exec: Execution,
    min_support: usize,
) -> Result<Vec<f64>> {
    map_slice(at, exec, |&x0| {
        let mut h = cfg.bandwidth;
        for _ in 0..=MAX_BANDWIDTH_DOUBLINGS {
            if let Some(fit) = fit_at(x, y, x0, h, degree, cfg.kernel, min_support) {
                return Ok(fit[deriv]);
            }
            h *= 2.0;
        }
        Err(GflmError::Smoothing(format!(
            "too few points near {x0:.6} even at bandwidth {:.6}",
            h / 2.0
        )))
    })
    .into_iter()
    .collect()
}

/// Nondecreasing least-squares fit with equal weights (pool adjacent violators).
pub fn isotonic_increasing(values: &[f64]) -> Vec<f64> {
    // Blocks of (sum, count).
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s1, c1) = blocks[blocks.len() - 1];
            let (s0, c0) = blocks[blocks.len() - 2];
            if s0 / c0 as f64 > s1 / c1 as f64 {
                blocks.pop();
                let last = blocks.len() - 1;
                blocks[last] = (s0 + s1, c0 + c1);
            } else {
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for (s, c) in blocks {
        out.extend(std::iter::repeat_n(s / c as f64, c));
    }
    out
}
