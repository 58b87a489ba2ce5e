//! Sampled curves on a shared grid, weight measures and trapezoid quadrature.
//!
//! Every curve in a [`FunctionalDataset`] is stored as its values on one
//! [`TimeGrid`]; integrals against the measure `v(t) dt` use the composite
//! trapezoid rule, so piecewise-linear integrands are integrated exactly.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GflmError, Result};

/// Strictly increasing sample points of the curve domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(GflmError::InvalidInput(format!(
                "a grid needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(GflmError::InvalidInput("grid contains non-finite points".into()));
        }
        if let Some(k) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(GflmError::InvalidInput(format!(
                "grid is not strictly increasing at index {}",
                k + 1
            )));
        }
        Ok(Self { points })
    }

    /// `m` equispaced points from `start` to `end` inclusive.
    pub fn uniform(start: f64, end: f64, m: usize) -> Result<Self> {
        if m < 2 || !(end > start) {
            return Err(GflmError::InvalidInput(format!(
                "uniform grid needs m >= 2 and end > start (m = {m}, [{start}, {end}])"
            )));
        }
        let step = (end - start) / (m - 1) as f64;
        let mut points: Vec<f64> = (0..m).map(|k| start + step * k as f64).collect();
        points[m - 1] = end;
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    /// Plain trapezoid weights for `∫ f(t) dt`.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let m = self.points.len();
        let mut w = vec![0.0; m];
        for k in 0..m - 1 {
            let half = 0.5 * (self.points[k + 1] - self.points[k]);
            w[k] += half;
            w[k + 1] += half;
        }
        w
    }
}

/// Density `v(t)` of the integration measure `dw(t) = v(t) dt`, sampled on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMeasure {
    values: Vec<f64>,
}

impl WeightMeasure {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(GflmError::InvalidInput(
                "weight values must be finite and nonnegative".into(),
            ));
        }
        if !values.iter().any(|v| *v > 0.0) {
            return Err(GflmError::InvalidInput(
                "weight measure needs at least one positive value".into(),
            ));
        }
        Ok(Self { values })
    }

    /// The default `v(t) = 1` on the whole grid.
    pub fn uniform(grid: &TimeGrid) -> Self {
        Self {
            values: vec![1.0; grid.len()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Combined quadrature weights `c_k v_k` so that `Σ_k q_k F(t_k) ≈ ∫ F(t) v(t) dt`.
    pub fn quadrature_weights(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        if self.values.len() != grid.len() {
            return Err(GflmError::Alignment(format!(
                "weight has {} values but grid has {} points",
                self.values.len(),
                grid.len()
            )));
        }
        Ok(grid
            .trapezoid_weights()
            .into_iter()
            .zip(&self.values)
            .map(|(c, v)| c * v)
            .collect())
    }
}

/// Values of one function on a [`TimeGrid`]. All values are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    values: Vec<f64>,
}

impl Curve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(GflmError::InvalidInput(format!(
                "curve value at index {k} is not finite"
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(m: usize) -> Self {
        Self {
            values: vec![0.0; m],
        }
    }

    /// Evaluates `f` at each grid point.
    pub fn from_fn(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid.points().iter().map(|&t| f(t)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sup_distance(&self, other: &Curve) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Kind of scalar response, which constrains the admissible values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseKind {
    Continuous,
    Binary,
    Count,
}

impl ResponseKind {
    /// Most specific kind compatible with every value.
    pub fn infer(responses: &[f64]) -> Self {
        if responses.iter().all(|&y| y == 0.0 || y == 1.0) {
            ResponseKind::Binary
        } else if responses.iter().all(|&y| y >= 0.0 && y.fract() == 0.0) {
            ResponseKind::Count
        } else {
            ResponseKind::Continuous
        }
    }

    fn check(self, responses: &[f64]) -> Result<()> {
        for (i, &y) in responses.iter().enumerate() {
            if !y.is_finite() {
                return Err(GflmError::Numeric {
                    row: i,
                    detail: "response is not finite".into(),
                });
            }
            let ok = match self {
                ResponseKind::Continuous => true,
                ResponseKind::Binary => y == 0.0 || y == 1.0,
                ResponseKind::Count => y >= 0.0 && y.fract() == 0.0,
            };
            if !ok {
                return Err(GflmError::InvalidInput(format!(
                    "response {y} at row {i} is not valid for {self:?} data"
                )));
            }
        }
        Ok(())
    }
}

/// `n` predictor curves on a common grid together with their scalar responses.
#[derive(Debug, Clone)]
pub struct FunctionalDataset {
    grid: TimeGrid,
    weight: WeightMeasure,
    curves: Vec<Curve>,
    responses: Vec<f64>,
    kind: ResponseKind,
}

impl FunctionalDataset {
    pub fn new(
        grid: TimeGrid,
        weight: WeightMeasure,
        curves: Vec<Curve>,
        responses: Vec<f64>,
        kind: ResponseKind,
    ) -> Result<Self> {
        if curves.is_empty() {
            return Err(GflmError::InvalidInput("dataset needs at least one curve".into()));
        }
        if curves.len() != responses.len() {
            return Err(GflmError::Alignment(format!(
                "{} curves but {} responses",
                curves.len(),
                responses.len()
            )));
        }
        if weight.values().len() != grid.len() {
            return Err(GflmError::Alignment(format!(
                "weight has {} values but grid has {} points",
                weight.values().len(),
                grid.len()
            )));
        }
        if let Some(i) = curves.iter().position(|c| c.len() != grid.len()) {
            return Err(GflmError::Alignment(format!(
                "curve {i} has {} values, grid has {} points",
                curves[i].len(),
                grid.len()
            )));
        }
        kind.check(&responses)?;
        Ok(Self {
            grid,
            weight,
            curves,
            responses,
            kind,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn weight(&self) -> &WeightMeasure {
        &self.weight
    }

    pub fn curves(&self) -> &[Curve] {
        &self.curves
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn kind(&self) -> ResponseKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    /// Curves as the rows of an `n × m` matrix.
    pub fn curve_matrix(&self) -> DMatrix<f64> {
        let m = self.grid.len();
        DMatrix::from_fn(self.curves.len(), m, |i, k| self.curves[i].values[k])
    }

    /// Same curves and grid with different responses.
    pub fn with_responses(&self, responses: Vec<f64>, kind: ResponseKind) -> Result<Self> {
        Self::new(
            self.grid.clone(),
            self.weight.clone(),
            self.curves.clone(),
            responses,
            kind,
        )
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            self.grid.clone(),
            self.weight.clone(),
            idx.iter().map(|&i| self.curves[i].clone()).collect(),
            idx.iter().map(|&i| self.responses[i]).collect(),
            self.kind,
        )
    }
}

/// Trapezoid approximation of `∫ f(t) g(t) v(t) dt`.
pub fn inner_product(f: &Curve, g: &Curve, w: &WeightMeasure, grid: &TimeGrid) -> Result<f64> {
    if f.len() != grid.len() || g.len() != grid.len() {
        return Err(GflmError::Alignment(format!(
            "curves of length {} and {} on a grid of {} points",
            f.len(),
            g.len(),
            grid.len()
        )));
    }
    let q = w.quadrature_weights(grid)?;
    Ok(weighted_dot(&q, f.values(), g.values()))
}

pub(crate) fn weighted_dot(q: &[f64], a: &[f64], b: &[f64]) -> f64 {
    q.iter().zip(a).zip(b).map(|((q, a), b)| q * a * b).sum()
}

/// Subtracts the pointwise sample mean; returns the centered data and the mean curve.
pub fn center_dataset(ds: &FunctionalDataset) -> (FunctionalDataset, Curve) {
    let n = ds.len() as f64;
    let m = ds.grid.len();
    let mut mean = vec![0.0; m];
    for c in &ds.curves {
        for (acc, v) in mean.iter_mut().zip(c.values()) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n;
    }
    let curves = ds
        .curves
        .iter()
        .map(|c| Curve {
            values: c.values.iter().zip(&mean).map(|(v, mu)| v - mu).collect(),
        })
        .collect();
    let centered = FunctionalDataset {
        grid: ds.grid.clone(),
        weight: ds.weight.clone(),
        curves,
        responses: ds.responses.clone(),
        kind: ds.kind,
    };
    (centered, Curve { values: mean })
}

/// Linear interpolation of `curve` from `from` onto `to`, holding end values
/// constant outside the source range. Information between source points is lost.
pub fn resample(curve: &Curve, from: &TimeGrid, to: &TimeGrid) -> Result<Curve> {
    if curve.len() != from.len() {
        return Err(GflmError::Alignment(format!(
            "curve has {} values, source grid has {} points",
            curve.len(),
            from.len()
        )));
    }
    let xs = from.points();
    let ys = curve.values();
    Curve::new(to.points().iter().map(|&t| interpolate(xs, ys, t)).collect())
}

/// Piecewise-linear interpolation on sorted `xs` with flat extrapolation.
pub(crate) fn interpolate(xs: &[f64], ys: &[f64], t: f64) -> f64 {
    let last = xs.len() - 1;
    if t <= xs[0] {
        return ys[0];
    }
    if t >= xs[last] {
        return ys[last];
    }
    let k = xs.partition_point(|&x| x <= t).saturating_sub(1).min(last - 1);
    let frac = (t - xs[k]) / (xs[k + 1] - xs[k]);
    ys[k] + frac * (ys[k + 1] - ys[k])
}

fn parse_f64(field: &str, line: usize, what: &str) -> Result<f64> {
    let value: f64 = field.trim().parse().map_err(|_| GflmError::Parse {
        line,
        detail: format!("{what} {field:?} is not a number"),
    })?;
    if !value.is_finite() {
        return Err(GflmError::Parse {
            line,
            detail: format!("{what} {field:?} is not finite"),
        });
    }
    Ok(value)
}

/// Reads a one-line sidecar of comma-separated grid points.
pub fn read_grid<R: Read>(reader: R) -> Result<TimeGrid> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let record = rdr
        .records()
        .next()
        .ok_or_else(|| GflmError::Parse {
            line: 1,
            detail: "grid file is empty".into(),
        })??;
    let points = record
        .iter()
        .map(|f| parse_f64(f, 1, "grid point"))
        .collect::<Result<Vec<_>>>()?;
    TimeGrid::new(points).map_err(|e| GflmError::Parse {
        line: 1,
        detail: e.to_string(),
    })
}

/// Subject identifiers and dataset parsed from wide CSV.
#[derive(Debug, Clone)]
pub struct WideCsv {
    pub ids: Vec<String>,
    pub dataset: FunctionalDataset,
}

/// Parses wide-format CSV: `id, response, x_1 .. x_m` per row.
///
/// With `grid = None` the first row is a header whose fields after the first
/// two are the grid points. With a sidecar grid, there is no header row.
/// Every row must have exactly `m + 2` fields.
pub fn read_wide_csv<R: Read>(
    reader: R,
    grid: Option<TimeGrid>,
    kind: Option<ResponseKind>,
) -> Result<WideCsv> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records().enumerate();

    let grid = match grid {
        Some(g) => g,
        None => {
            let (_, header) = records.next().ok_or_else(|| GflmError::Parse {
                line: 1,
                detail: "file is empty".into(),
            })?;
            let header = header?;
            if header.len() < 4 {
                return Err(GflmError::Parse {
                    line: 1,
                    detail: "header needs id, response and at least 2 grid points".into(),
                });
            }
            let points = header
                .iter()
                .skip(2)
                .map(|f| parse_f64(f, 1, "grid point"))
                .collect::<Result<Vec<_>>>()?;
            TimeGrid::new(points).map_err(|e| GflmError::Parse {
                line: 1,
                detail: e.to_string(),
            })?
        }
    };

    let m = grid.len();
    let mut ids = Vec::new();
    let mut curves = Vec::new();
    let mut responses = Vec::new();
    for (idx, record) in records {
        let record = record?;
        let line = idx + 1;
        if record.len() == 1 && record.get(0).is_some_and(str::is_empty) {
            continue;
        }
        if record.len() != m + 2 {
            return Err(GflmError::Parse {
                line,
                detail: format!(
                    "expected {} fields (id, response, {m} curve values), found {}",
                    m + 2,
                    record.len()
                ),
            });
        }
        ids.push(record[0].to_string());
        responses.push(parse_f64(&record[1], line, "response")?);
        let values = record
            .iter()
            .skip(2)
            .map(|f| parse_f64(f, line, "curve value"))
            .collect::<Result<Vec<_>>>()?;
        curves.push(Curve { values });
    }
    if curves.is_empty() {
        return Err(GflmError::Parse {
            line: 1,
            detail: "no data rows".into(),
        });
    }
    let kind = kind.unwrap_or_else(|| ResponseKind::infer(&responses));
    let weight = WeightMeasure::uniform(&grid);
    let dataset = FunctionalDataset::new(grid, weight, curves, responses, kind)?;
    Ok(WideCsv { ids, dataset })
}

pub fn read_wide_csv_path(
    data: &Path,
    grid: Option<&Path>,
    kind: Option<ResponseKind>,
) -> Result<WideCsv> {
    let grid = match grid {
        Some(path) => Some(read_grid(open(path)?)?),
        None => None,
    };
    read_wide_csv(open(data)?, grid, kind)
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

/// Writes the dataset in the header-row wide format read by [`read_wide_csv`].
pub fn write_wide_csv<W: Write>(writer: W, ids: &[String], ds: &FunctionalDataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "response".to_string()];
    header.extend(ds.grid().points().iter().map(|t| format!("{t}")));
    wtr.write_record(&header)?;
    for (i, curve) in ds.curves().iter().enumerate() {
        let mut row = vec![ids[i].clone(), format!("{}", ds.responses()[i])];
        row.extend(curve.values().iter().map(|v| format!("{v}")));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
