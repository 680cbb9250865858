//! Two-parameter grid sweeps classifying each cell of the reduced model by
//! its number of folds.
//!
//! Cell `(ix, iy)` is evaluated at its center
//! `px = lo + (ix + 1/2) (hi - lo) / n`. The JSON summary written by
//! [`write_summary`] has the shape
//!
//! ```text
//! { "schema_version": 1, "spec": SweepSpec,
//!   "histogram": { "<class>": count, ... },
//!   "boundary_cells": [[ix, iy], ...],
//!   "errors": [{ "ix", "iy", "message" }, ...],
//!   "computed": n, "reused": n }
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::{graph_folds, CriticalField, FoldSearch};
use crate::model::{DecisionParamsReduced, ParamError};
use crate::parallel::par_map;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: [&str; 7] = ["ix", "iy", "px", "py", "class", "n_folds", "fold_data"];

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep spec: {0}")]
    Spec(#[from] ParamError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("region map row {row}: {reason}")]
    Parse { row: usize, reason: String },
}

/// One swept parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(name: &str, lo: f64, hi: f64, n: usize) -> Self {
        Self { name: name.to_owned(), lo, hi, n }
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * (self.hi - self.lo) / self.n as f64
    }

    fn validate(&self) -> Result<(), ParamError> {
        if DecisionParamsReduced::default_like().get(&self.name).is_none() {
            return Err(ParamError::new("name", format!("unknown parameter {:?}", self.name)));
        }
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(ParamError::new("hi", "range must be finite with lo < hi"));
        }
        if self.n < 2 {
            return Err(ParamError::new("n", "resolution must be >= 2"));
        }
        Ok(())
    }
}

impl DecisionParamsReduced {
    fn default_like() -> Self {
        Self { alpha: 0.0, beta: 0.0, gamma: 0.0, b: 0.0, c: 0.0, d: 0.0, r: 0.0, epsilon: 0.0 }
    }
}

/// Grid over two parameters of the reduced model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub x: Axis,
    pub y: Axis,
    /// Values of all parameters; the swept ones are overwritten per cell.
    pub base: DecisionParamsReduced,
    /// Fold search over the resource stock.
    #[serde(default)]
    pub search: FoldSearch,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), ParamError> {
        self.x.validate().map_err(|e| e.within("x"))?;
        self.y.validate().map_err(|e| e.within("y"))?;
        if self.x.name == self.y.name {
            return Err(ParamError::new("y.name", "must differ from x.name"));
        }
        let s = &self.search;
        if !(s.y_lo.is_finite() && s.y_hi.is_finite() && s.y_lo < s.y_hi) {
            return Err(ParamError::new("search.y_hi", "y range must be finite with y_lo < y_hi"));
        }
        if s.levels < 2 || s.grid_cells < 2 {
            return Err(ParamError::new("search.levels", "levels and grid_cells must be >= 2"));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.x.n * self.y.n
    }

    /// Row-major index, `ix` fastest.
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.x.n + ix
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.x.n, index / self.x.n)
    }

    /// Parameters at the center of a cell.
    pub fn params_at(&self, ix: usize, iy: usize) -> Result<DecisionParamsReduced, ParamError> {
        let mut p = self.base;
        p.set(&self.x.name, self.x.center(ix))?;
        p.set(&self.y.name, self.y.center(iy))?;
        Ok(p)
    }
}

/// Class of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CellClass {
    /// Even number of folds inside the scanned stock range.
    Folds(usize),
    /// Part of the fold structure needs a negative resource stock.
    Invalid,
    Error,
}

impl fmt::Display for CellClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Folds(n) => write!(f, "{n}"),
            Self::Invalid => f.write_str("invalid"),
            Self::Error => f.write_str("error"),
        }
    }
}

impl FromStr for CellClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "invalid" => Ok(Self::Invalid),
            "error" => Ok(Self::Error),
            n => n.parse().map(Self::Folds).map_err(|_| format!("unknown class {s:?}")),
        }
    }
}

impl Serialize for CellClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CellClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Result for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub ix: usize,
    pub iy: usize,
    pub px: f64,
    pub py: f64,
    pub class: CellClass,
    /// Fold coordinates `(x, y)`, sorted by `x`. Invalid cells list every
    /// fold found, including those below the stock range.
    pub folds: Vec<(f64, f64)>,
    /// Reason for an error cell; not stored in the CSV.
    pub message: Option<String>,
}

fn error_cell(base: CellResult, message: String) -> CellResult {
    CellResult { class: CellClass::Error, message: Some(message), ..base }
}

/// Classifies a single cell.
///
/// The reduced critical manifold is a graph `y = phi(x)`, so every fold on
/// the domain is found. A cell is invalid when a fold lies below the scanned
/// stock range, or when the fold count is odd because `phi` is still falling
/// below that range at the edge of the domain (the missing fold sits at
/// `y << 0`, pushed there by the cost pole). Otherwise the class is the
/// number of folds inside the range; odd counts are errors.
pub fn classify_cell(spec: &SweepSpec, ix: usize, iy: usize) -> CellResult {
    let base = CellResult {
        ix,
        iy,
        px: spec.x.center(ix),
        py: spec.y.center(iy),
        class: CellClass::Folds(0),
        folds: Vec::new(),
        message: None,
    };
    let params = match spec.params_at(ix, iy).and_then(|p| p.validate().map(|_| p)) {
        Ok(p) => p,
        Err(e) => return error_cell(base, e.to_string()),
    };
    match classify_params(&params, &spec.search) {
        Ok((class, folds)) => CellResult { class, folds, ..base },
        Err(e) => error_cell(base, e),
    }
}

fn classify_params(p: &DecisionParamsReduced, search: &FoldSearch) -> Result<(CellClass, Vec<(f64, f64)>), String> {
    let all = graph_folds(p, search.grid_cells).map_err(|e| e.to_string())?;
    let folds: Vec<(f64, f64)> = all.iter().map(|f| (f.x_star, f.y_star)).collect();
    let below = folds.iter().any(|f| f.1 < search.y_lo);
    let falling_off = all.len() % 2 == 1 && {
        let edge = p.x_domain().1;
        match p.graph_y(edge) {
            Ok(Some(y)) => y < search.y_lo && p.field_dx(edge, y).is_ok_and(|g| g > 0.0),
            _ => false,
        }
    };
    if below || falling_off {
        return Ok((CellClass::Invalid, folds));
    }
    let inside: Vec<(f64, f64)> = folds.into_iter().filter(|f| f.1 <= search.y_hi).collect();
    if inside.len() % 2 == 1 {
        return Err(format!("odd fold count {}", inside.len()));
    }
    Ok((CellClass::Folds(inside.len()), inside))
}

/// Classifies the listed cell indices on `workers` threads (0 = all cores).
pub fn sweep_cells(spec: &SweepSpec, indices: &[usize], workers: usize) -> Vec<CellResult> {
    par_map(indices.len(), workers, |i| {
        let (ix, iy) = spec.coords(indices[i]);
        classify_cell(spec, ix, iy)
    })
}

/// Classified grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    pub spec: SweepSpec,
    /// Row-major, `ix` fastest.
    pub cells: Vec<CellResult>,
}

/// Full sweep; output is independent of `workers`.
pub fn sweep(spec: &SweepSpec, workers: usize) -> Result<RegionMap, SweepError> {
    spec.validate()?;
    let all: Vec<usize> = (0..spec.n_cells()).collect();
    Ok(RegionMap { spec: spec.clone(), cells: sweep_cells(spec, &all, workers) })
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One CSV record for a cell.
pub fn csv_record(c: &CellResult) -> [String; 7] {
    let data: Vec<String> = c.folds.iter().map(|(x, y)| format!("{}:{}", fmt_f64(*x), fmt_f64(*y))).collect();
    [
        c.ix.to_string(),
        c.iy.to_string(),
        fmt_f64(c.px),
        fmt_f64(c.py),
        c.class.to_string(),
        c.folds.len().to_string(),
        data.join(";"),
    ]
}

fn parse_record(row: usize, rec: &csv::StringRecord) -> Result<CellResult, SweepError> {
    let bad = |reason: String| SweepError::Parse { row, reason };
    if rec.len() != CSV_HEADER.len() {
        return Err(bad(format!("expected {} fields, got {}", CSV_HEADER.len(), rec.len())));
    }
    let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("{}: {e}", CSV_HEADER[i])));
    let idx = |i: usize| rec[i].parse::<usize>().map_err(|e| bad(format!("{}: {e}", CSV_HEADER[i])));
    let mut folds = Vec::new();
    for pair in rec[6].split(';').filter(|p| !p.is_empty()) {
        let (x, y) = pair.split_once(':').ok_or_else(|| bad(format!("bad fold pair {pair:?}")))?;
        let x = x.parse::<f64>().map_err(|e| bad(format!("fold x: {e}")))?;
        let y = y.parse::<f64>().map_err(|e| bad(format!("fold y: {e}")))?;
        folds.push((x, y));
    }
    if idx(5)? != folds.len() {
        return Err(bad("n_folds does not match fold_data".into()));
    }
    Ok(CellResult {
        ix: idx(0)?,
        iy: idx(1)?,
        px: num(2)?,
        py: num(3)?,
        class: rec[4].parse().map_err(bad)?,
        folds,
        message: None,
    })
}

/// Reads cell rows from a region-map CSV. Rows may be in any order and the
/// set may be incomplete (a partial sweep); a truncated last line is dropped.
pub fn read_cells<R: Read>(reader: R) -> Result<Vec<CellResult>, SweepError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(SweepError::Parse { row: 0, reason: format!("unexpected header {header:?}") });
    }
    let records: Vec<csv::StringRecord> = rdr.records().collect::<Result<_, _>>()?;
    let mut cells = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        match parse_record(i + 1, rec) {
            Ok(c) => cells.push(c),
            Err(_) if i + 1 == records.len() => break,
            Err(e) => return Err(e),
        }
    }
    Ok(cells)
}

impl RegionMap {
    pub fn cell(&self, ix: usize, iy: usize) -> &CellResult {
        &self.cells[self.spec.index(ix, iy)]
    }

    /// Assembles a map from cells in any order; every cell must be present once.
    pub fn from_cells(spec: SweepSpec, cells: Vec<CellResult>) -> Result<Self, SweepError> {
        let mut slots: Vec<Option<CellResult>> = vec![None; spec.n_cells()];
        for c in cells {
            if c.ix >= spec.x.n || c.iy >= spec.y.n {
                return Err(SweepError::Parse { row: 0, reason: format!("cell ({}, {}) outside grid", c.ix, c.iy) });
            }
            let i = spec.index(c.ix, c.iy);
            slots[i] = Some(c);
        }
        let cells = slots
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                c.ok_or_else(|| SweepError::Parse { row: 0, reason: format!("missing cell {:?}", spec.coords(i)) })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { spec, cells })
    }

    pub fn histogram(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<CellClass, usize> = BTreeMap::new();
        for c in &self.cells {
            *counts.entry(c.class).or_default() += 1;
        }
        counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Cells with a 4-neighbor of a different class.
    pub fn boundary_cells(&self) -> Vec<(usize, usize)> {
        let (nx, ny) = (self.spec.x.n, self.spec.y.n);
        let mut out = Vec::new();
        for iy in 0..ny {
            for ix in 0..nx {
                let class = self.cell(ix, iy).class;
                let mut neighbors = Vec::with_capacity(4);
                if ix > 0 {
                    neighbors.push((ix - 1, iy));
                }
                if ix + 1 < nx {
                    neighbors.push((ix + 1, iy));
                }
                if iy > 0 {
                    neighbors.push((ix, iy - 1));
                }
                if iy + 1 < ny {
                    neighbors.push((ix, iy + 1));
                }
                if neighbors.iter().any(|&(jx, jy)| self.cell(jx, jy).class != class) {
                    out.push((ix, iy));
                }
            }
        }
        out
    }

    /// Chebyshev distance from a cell to the nearest cell of another class.
    pub fn distance_to_boundary(&self, ix: usize, iy: usize) -> usize {
        let class = self.cell(ix, iy).class;
        let mut best = usize::MAX;
        for c in &self.cells {
            if c.class != class {
                best = best.min(c.ix.abs_diff(ix).max(c.iy.abs_diff(iy)));
            }
        }
        best
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SweepError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        for c in &self.cells {
            w.write_record(csv_record(c))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellErrorEntry {
    pub ix: usize,
    pub iy: usize,
    pub message: String,
}

/// JSON summary of a region map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema_version: u32,
    pub spec: SweepSpec,
    pub histogram: BTreeMap<String, usize>,
    pub boundary_cells: Vec<(usize, usize)>,
    pub errors: Vec<CellErrorEntry>,
    /// Cells evaluated in this run.
    pub computed: usize,
    /// Cells taken over from a partial earlier run.
    pub reused: usize,
}

impl SweepSummary {
    pub fn new(map: &RegionMap, computed: usize, reused: usize) -> Self {
        let errors = map
            .cells
            .iter()
            .filter(|c| c.class == CellClass::Error)
            .map(|c| CellErrorEntry {
                ix: c.ix,
                iy: c.iy,
                message: c.message.clone().unwrap_or_else(|| "from earlier run".into()),
            })
            .collect();
        Self {
            schema_version: SUMMARY_SCHEMA_VERSION,
            spec: map.spec.clone(),
            histogram: map.histogram(),
            boundary_cells: map.boundary_cells(),
            errors,
            computed,
            reused,
        }
    }
}

pub fn write_summary<W: Write>(summary: &SweepSummary, writer: W) -> Result<(), SweepError> {
    serde_json::to_writer_pretty(writer, summary)?;
    Ok(())
}

/// Fig. 5-style reference planes of the reduced model, at `n x n`.
pub mod planes {
    use super::*;

    fn base(alpha: f64, beta: f64, gamma: f64, c: f64, d: f64) -> DecisionParamsReduced {
        DecisionParamsReduced { alpha, beta, gamma, b: 30.0, c, d, r: 1.6156, epsilon: 0.01 }
    }

    fn spec(x: Axis, y: Axis, base: DecisionParamsReduced) -> SweepSpec {
        SweepSpec { x, y, base, search: FoldSearch::default() }
    }

    /// alpha-gamma plane with `beta = 1`, `c = 3`, `d = 1.3`.
    pub fn alpha_gamma(n: usize) -> SweepSpec {
        spec(Axis::new("alpha", 0.0, 3.0, n), Axis::new("gamma", 0.0, 6.0, n), base(2.0, 1.0, 3.5, 3.0, 1.3))
    }

    /// alpha-beta plane with `gamma = 3.5`, `c = 2.8`, `d = 1.3`.
    pub fn alpha_beta(n: usize) -> SweepSpec {
        spec(Axis::new("alpha", 0.0, 3.0, n), Axis::new("beta", 0.0, 3.0, n), base(2.0, 1.0, 3.5, 2.8, 1.3))
    }

    pub fn alpha_c(n: usize) -> SweepSpec {
        spec(Axis::new("alpha", 0.0, 3.0, n), Axis::new("c", 0.0, 5.0, n), base(2.0, 1.0, 3.5, 3.0, 1.3))
    }

    pub fn alpha_d(n: usize) -> SweepSpec {
        spec(Axis::new("alpha", 0.0, 3.0, n), Axis::new("d", 1.0, 2.0, n), base(2.0, 1.0, 3.5, 4.0, 1.3))
    }

    pub fn beta_d(n: usize) -> SweepSpec {
        spec(Axis::new("beta", 0.0, 3.0, n), Axis::new("d", 1.0, 2.0, n), base(2.0, 1.0, 3.5, 3.0, 1.3))
    }

    pub fn gamma_beta(n: usize) -> SweepSpec {
        spec(Axis::new("gamma", 0.0, 8.0, n), Axis::new("beta", 0.0, 3.0, n), base(2.0, 1.0, 3.5, 3.0, 1.3))
    }

    pub fn gamma_c(n: usize) -> SweepSpec {
        spec(Axis::new("gamma", 0.0, 8.0, n), Axis::new("c", 0.0, 5.0, n), base(2.0, 1.0, 3.5, 3.0, 1.3))
    }

    pub fn gamma_d(n: usize) -> SweepSpec {
        spec(Axis::new("gamma", 0.0, 8.0, n), Axis::new("d", 1.0, 2.0, n), base(2.0, 1.0, 3.5, 3.0, 1.3))
    }

    pub fn c_beta(n: usize) -> SweepSpec {
        spec(Axis::new("c", 0.0, 3.0, n), Axis::new("beta", 0.0, 3.0, n), base(2.0, 1.0, 3.5, 3.0, 1.3))
    }

    pub fn c_d(n: usize) -> SweepSpec {
        spec(Axis::new("c", 0.0, 3.0, n), Axis::new("d", 1.0, 2.0, n), base(2.0, 1.0, 3.5, 3.0, 1.3))
    }

    /// The appendix planes, by name.
    pub fn appendix(n: usize) -> Vec<(&'static str, SweepSpec)> {
        vec![
            ("alpha_beta", alpha_beta(n)),
            ("alpha_c", alpha_c(n)),
            ("alpha_d", alpha_d(n)),
            ("beta_d", beta_d(n)),
            ("gamma_beta", gamma_beta(n)),
            ("gamma_c", gamma_c(n)),
            ("gamma_d", gamma_d(n)),
            ("c_beta", c_beta(n)),
            ("c_d", c_d(n)),
        ]
    }
}
