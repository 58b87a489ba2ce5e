//! Orthonormal bases on the curve grid: the sine (Fourier) system and the
//! empirical eigenbasis of the covariance operator, plus score projection
//! and reconstruction of coefficient vectors as functions.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::curve::{weighted_dot, Curve, FunctionalDataset, TimeGrid, WeightMeasure};
use crate::error::{GflmError, Result};

/// Entrywise tolerance on the Gram matrix of a valid basis.
pub const ORTHONORMALITY_TOL: f64 = 1e-6;
/// Eigenvalues below this fraction of the largest are treated as zero.
pub const EIGEN_RELATIVE_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Fourier,
    Empirical,
}

/// Ordered orthonormal functions `ρ_1 .. ρ_J` on a grid.
#[derive(Debug, Clone)]
pub struct Basis {
    grid: TimeGrid,
    weight: WeightMeasure,
    functions: Vec<Curve>,
    eigenvalues: Option<Vec<f64>>,
    kind: BasisKind,
}

impl Basis {
    /// Validates orthonormality under the grid quadrature and, when present,
    /// that eigenvalues are nonincreasing and nonnegative up to roundoff.
    pub fn new(
        grid: TimeGrid,
        weight: WeightMeasure,
        functions: Vec<Curve>,
        eigenvalues: Option<Vec<f64>>,
        kind: BasisKind,
    ) -> Result<Self> {
        if functions.is_empty() {
            return Err(GflmError::InvalidInput("basis needs at least one function".into()));
        }
        if let Some(j) = functions.iter().position(|f| f.len() != grid.len()) {
            return Err(GflmError::Alignment(format!(
                "basis function {} has {} values, grid has {} points",
                j + 1,
                functions[j].len(),
                grid.len()
            )));
        }
        if let Some(ev) = &eigenvalues {
            if ev.len() != functions.len() {
                return Err(GflmError::Alignment(format!(
                    "{} eigenvalues for {} functions",
                    ev.len(),
                    functions.len()
                )));
            }
            if ev.iter().any(|&l| l < -1e-10 || !l.is_finite()) {
                return Err(GflmError::InvalidInput("eigenvalues must be nonnegative".into()));
            }
            if ev.windows(2).any(|w| w[1] > w[0]) {
                return Err(GflmError::InvalidInput("eigenvalues must be nonincreasing".into()));
            }
        }
        let q = weight.quadrature_weights(&grid)?;
        let gram_error = gram_deviation(&q, &functions);
        if gram_error > ORTHONORMALITY_TOL {
            return Err(GflmError::Resolution(format!(
                "basis Gram matrix deviates from identity by {gram_error:.3e}"
            )));
        }
        Ok(Self {
            grid,
            weight,
            functions,
            eigenvalues,
            kind,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn weight(&self) -> &WeightMeasure {
        &self.weight
    }

    pub fn functions(&self) -> &[Curve] {
        &self.functions
    }

    pub fn eigenvalues(&self) -> Option<&[f64]> {
        self.eigenvalues.as_deref()
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    /// Number of basis functions `J`.
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// Gram matrix under the grid quadrature.
    pub fn gram(&self) -> DMatrix<f64> {
        let q = self
            .weight
            .quadrature_weights(&self.grid)
            .expect("validated at construction");
        let j = self.functions.len();
        DMatrix::from_fn(j, j, |a, b| {
            weighted_dot(&q, self.functions[a].values(), self.functions[b].values())
        })
    }

    /// Values as an `m × J` matrix, one column per function.
    pub fn value_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.grid.len(), self.functions.len(), |k, j| {
            self.functions[j].values()[k]
        })
    }

    /// Writes one column per function, one row per grid point.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let header: Vec<String> = (1..=self.len()).map(|j| format!("rho_{j}")).collect();
        wtr.write_record(&header)?;
        for k in 0..self.grid.len() {
            wtr.write_record(self.functions.iter().map(|f| format!("{}", f.values()[k])))?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Writes the eigenvalues as one comma-separated line; no-op for bases without them.
    pub fn write_eigenvalues<W: Write>(&self, mut writer: W) -> Result<()> {
        if let Some(ev) = &self.eigenvalues {
            let line: Vec<String> = ev.iter().map(|v| format!("{v}")).collect();
            writeln!(writer, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Reads a basis written by [`Basis::write_csv`], with an optional eigenvalue sidecar.
    pub fn read_csv<R: Read, S: Read>(
        reader: R,
        eigenvalues: Option<S>,
        grid: TimeGrid,
        weight: WeightMeasure,
    ) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let width = rdr.headers()?.len();
        let mut columns = vec![Vec::with_capacity(grid.len()); width];
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| GflmError::Parse {
                    line: row + 2,
                    detail: format!("basis value {field:?} is not a number"),
                })?;
                columns[j].push(v);
            }
        }
        let functions = columns
            .into_iter()
            .map(Curve::new)
            .collect::<Result<Vec<_>>>()?;
        let (eigenvalues, kind) = match eigenvalues {
            Some(src) => {
                let mut text = String::new();
                let mut src = src;
                src.read_to_string(&mut text)?;
                let ev = text
                    .trim()
                    .split(',')
                    .map(|f| {
                        f.trim().parse::<f64>().map_err(|_| GflmError::Parse {
                            line: 1,
                            detail: format!("eigenvalue {f:?} is not a number"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (Some(ev), BasisKind::Empirical)
            }
            None => (None, BasisKind::Fourier),
        };
        Self::new(grid, weight, functions, eigenvalues, kind)
    }
}

fn gram_deviation(q: &[f64], functions: &[Curve]) -> f64 {
    let mut worst: f64 = 0.0;
    for a in 0..functions.len() {
        for b in a..functions.len() {
            let ip = weighted_dot(q, functions[a].values(), functions[b].values());
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((ip - target).abs());
        }
    }
    worst
}

/// Design matrix of projected scores: column 0 is the intercept (all ones),
/// columns `1..=p` hold `ε_j^{(i)} = ⟨X_i, ρ_j⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix(DMatrix<f64>);

impl ScoreMatrix {
    /// Wraps slope scores (`n × p`) and prepends the intercept column.
    pub fn from_slopes(slopes: &DMatrix<f64>) -> Result<Self> {
        if slopes.nrows() == 0 || slopes.ncols() == 0 {
            return Err(GflmError::InvalidInput(
                "score matrix needs n >= 1 and p >= 1".into(),
            ));
        }
        if slopes.iter().any(|v| !v.is_finite()) {
            return Err(GflmError::InvalidInput("scores must be finite".into()));
        }
        let n = slopes.nrows();
        let p = slopes.ncols();
        Ok(Self(DMatrix::from_fn(n, p + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                slopes[(i, j - 1)]
            }
        })))
    }

    /// Accepts a full design matrix whose first column must be all ones.
    pub fn from_design(design: DMatrix<f64>) -> Result<Self> {
        if design.nrows() == 0 || design.ncols() < 2 {
            return Err(GflmError::InvalidInput(
                "score matrix needs n >= 1 and p >= 1".into(),
            ));
        }
        if design.column(0).iter().any(|&v| v != 1.0) {
            return Err(GflmError::InvalidInput(
                "score matrix column 0 must be identically 1".into(),
            ));
        }
        Ok(Self(design))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    /// Number of slope columns.
    pub fn p(&self) -> usize {
        self.0.ncols() - 1
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.0.row(i).transpose()
    }

    /// Keeps the intercept and the first `p` slope columns.
    pub fn truncate(&self, p: usize) -> Result<Self> {
        if p == 0 || p > self.p() {
            return Err(GflmError::Range(format!(
                "cannot truncate {} score columns to {p}",
                self.p()
            )));
        }
        Ok(Self(self.0.columns(0, p + 1).into_owned()))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self(self.0.select_rows(idx))
    }

    /// Drops row `i`.
    pub fn without_row(&self, i: usize) -> Self {
        Self(self.0.clone().remove_row(i))
    }

    /// Multiplies slope column `j` (1-based) by `c`.
    pub fn scale_column(&self, j: usize, c: f64) -> Self {
        let mut m = self.0.clone();
        m.column_mut(j).scale_mut(c);
        Self(m)
    }

    /// Slope columns only, `n × p`.
    pub fn slopes(&self) -> DMatrix<f64> {
        self.0.columns(1, self.p()).into_owned()
    }
}

/// `√(2/L) sin(π j (t − a)/L)` for `j = 1..=J` on a grid spanning `[a, a + L]`;
/// on `[0, 1]` this is `√2 sin(π j t)`.
pub fn fourier_basis(j_max: usize, grid: &TimeGrid) -> Result<Basis> {
    if j_max == 0 {
        return Err(GflmError::InvalidInput("need at least one basis function".into()));
    }
    let a = grid.start();
    let len = grid.end() - a;
    let scale = (2.0 / len).sqrt();
    let functions = (1..=j_max)
        .map(|j| Curve::from_fn(grid, |t| scale * (PI * j as f64 * (t - a) / len).sin()))
        .collect::<Result<Vec<_>>>()?;
    Basis::new(
        grid.clone(),
        WeightMeasure::uniform(grid),
        functions,
        None,
        BasisKind::Fourier,
    )
    .map_err(|e| match e {
        GflmError::Resolution(msg) => GflmError::Resolution(format!(
            "{} grid points cannot resolve {j_max} sine functions ({msg})",
            grid.len()
        )),
        other => other,
    })
}

/// Sample covariance kernel `K̂(s_a, s_b) = (1/n) Σ_i X_i(s_a) X_i(s_b)` of centered data.
pub fn estimate_covariance(ds: &FunctionalDataset) -> Result<DMatrix<f64>> {
    let x = ds.curve_matrix();
    let n = ds.len() as f64;
    for (k, col) in x.column_iter().enumerate() {
        let mean = col.sum() / n;
        if mean.abs() > 1e-6 {
            return Err(GflmError::Precondition(format!(
                "data not centered: mean {mean:.3e} at grid index {k}"
            )));
        }
    }
    let mut k = x.tr_mul(&x) / n;
    let m = k.nrows();
    for a in 0..m {
        for b in a + 1..m {
            k[(b, a)] = k[(a, b)];
        }
    }
    Ok(k)
}

/// Top-`J` eigenfunctions of the integral operator with kernel `K` under `dw`.
///
/// The operator is discretized as `W^{1/2} K W^{1/2}` with `W` the quadrature
/// weights, so eigenvectors map back through `W^{-1/2}` and are orthonormal
/// under the grid quadrature. At zero-weight grid points the eigenfunction is
/// filled in from the operator itself. Eigenvalues below
/// [`EIGEN_RELATIVE_CUTOFF`] times the largest are dropped, so fewer than `J`
/// functions may be returned.
pub fn eigenbasis(k: &DMatrix<f64>, grid: &TimeGrid, w: &WeightMeasure, j_max: usize) -> Result<Basis> {
    let m = grid.len();
    if k.nrows() != m || k.ncols() != m {
        return Err(GflmError::Alignment(format!(
            "kernel is {}×{}, grid has {m} points",
            k.nrows(),
            k.ncols()
        )));
    }
    if j_max == 0 || j_max > m {
        return Err(GflmError::Range(format!(
            "requested {j_max} eigenfunctions from a {m}-point grid"
        )));
    }
    let asym = (k - k.transpose()).amax();
    if asym > 1e-8 {
        return Err(GflmError::InvalidInput(format!(
            "kernel is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    let q = w.quadrature_weights(grid)?;
    let sq: Vec<f64> = q.iter().map(|v| v.sqrt()).collect();
    let mut op = DMatrix::from_fn(m, m, |a, b| sq[a] * k[(a, b)] * sq[b]);
    // Exact symmetry for the eigensolver.
    for a in 0..m {
        for b in a + 1..m {
            let avg = 0.5 * (op[(a, b)] + op[(b, a)]);
            op[(a, b)] = avg;
            op[(b, a)] = avg;
        }
    }
    let eig = SymmetricEigen::new(op);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let largest = eig.eigenvalues[order[0]];
    if !(largest > 0.0) {
        return Err(GflmError::InvalidInput("kernel has no positive eigenvalue".into()));
    }
    let cutoff = EIGEN_RELATIVE_CUTOFF * largest;

    let mut functions = Vec::new();
    let mut values = Vec::new();
    for &idx in order.iter().take(j_max) {
        let lambda = eig.eigenvalues[idx];
        if lambda <= cutoff {
            break;
        }
        let u = eig.eigenvectors.column(idx);
        let mut f: Vec<f64> = (0..m)
            .map(|a| if q[a] > 0.0 { u[a] / sq[a] } else { 0.0 })
            .collect();
        for a in (0..m).filter(|&a| q[a] == 0.0) {
            f[a] = (0..m).map(|b| k[(a, b)] * q[b] * f[b]).sum::<f64>() / lambda;
        }
        fix_sign(&mut f, &q);
        functions.push(Curve::new(f)?);
        values.push(lambda);
    }
    Basis::new(
        grid.clone(),
        w.clone(),
        functions,
        Some(values),
        BasisKind::Empirical,
    )
}

/// Makes `∫ f dw ≥ 0`; when that integral is negligible, makes the entry of
/// largest magnitude positive.
fn fix_sign(f: &mut [f64], q: &[f64]) {
    let mass: f64 = f.iter().zip(q).map(|(v, w)| v * w).sum();
    let flip = if mass.abs() >= 1e-10 {
        mass < 0.0
    } else {
        let mut best = 0usize;
        for (a, v) in f.iter().enumerate() {
            if v.abs() > f[best].abs() {
                best = a;
            }
        }
        f[best] < 0.0
    };
    if flip {
        f.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Covariance estimate and eigenbasis from raw (uncentered) data.
pub fn empirical_basis(ds: &FunctionalDataset, j_max: usize) -> Result<Basis> {
    let (centered, _) = crate::curve::center_dataset(ds);
    let k = estimate_covariance(&centered)?;
    eigenbasis(&k, ds.grid(), ds.weight(), j_max)
}

/// Projects every curve onto the first `p` basis functions.
pub fn project_scores(ds: &FunctionalDataset, basis: &Basis, p: usize) -> Result<ScoreMatrix> {
    if p == 0 || p > basis.len() {
        return Err(GflmError::Range(format!(
            "p = {p} outside 1..={} basis functions",
            basis.len()
        )));
    }
    if ds.grid().len() != basis.grid().len() {
        return Err(GflmError::Alignment(format!(
            "dataset grid has {} points, basis grid has {}",
            ds.grid().len(),
            basis.grid().len()
        )));
    }
    let q = ds.weight().quadrature_weights(ds.grid())?;
    let mut x = ds.curve_matrix();
    for (mut col, w) in x.column_iter_mut().zip(&q) {
        col.scale_mut(*w);
    }
    let rho = basis.value_matrix().columns(0, p).into_owned();
    ScoreMatrix::from_slopes(&(x * rho))
}

/// `β̂_0` and the curve `Σ_{j=1}^{p} β̂_j ρ_j(t)` for `coeffs = (β̂_0, .., β̂_p)`.
pub fn reconstruct(coeffs: &[f64], basis: &Basis) -> Result<(f64, Curve)> {
    if coeffs.is_empty() {
        return Err(GflmError::InvalidInput("coefficient vector is empty".into()));
    }
    let p = coeffs.len() - 1;
    if p > basis.len() {
        return Err(GflmError::Range(format!(
            "{p} slope coefficients for {} basis functions",
            basis.len()
        )));
    }
    let m = basis.grid().len();
    let mut values = vec![0.0; m];
    for (beta, f) in coeffs[1..].iter().zip(basis.functions()) {
        for (acc, v) in values.iter_mut().zip(f.values()) {
            *acc += beta * v;
        }
    }
    Ok((coeffs[0], Curve::new(values)?))
}
