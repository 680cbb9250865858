//! Critical manifold `F(x, y) = 0` of the layer problem: roots at fixed `y`,
//! fold points, asymptotes and the reduced slow flow.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    logistic, profit_difference, DecisionParamsFull, DecisionParamsReduced, ModelError, NormalFormParams,
    State, POLE_GUARD,
};

/// Offset of the root-scan interval from the asymptotes and the cost pole.
pub const DOMAIN_MARGIN: f64 = 1e-6;
/// Default number of grid cells in a root scan.
pub const DEFAULT_GRID_CELLS: usize = 2000;
/// Default number of `y` levels in a fold search.
pub const DEFAULT_LEVELS: usize = 400;

/// Fast field at `eps = 0`, seen as a function of `(x, y)`.
pub trait CriticalField: Sync {
    fn field(&self, x: f64, y: f64) -> Result<f64, ModelError>;

    fn field_dx(&self, x: f64, y: f64) -> Result<f64, ModelError> {
        let h = 1e-6 * x.abs().max(1.0);
        Ok((self.field(x + h, y)? - self.field(x - h, y)?) / (2.0 * h))
    }

    fn field_dy(&self, x: f64, y: f64) -> Result<f64, ModelError> {
        let h = 1e-6 * y.abs().max(1.0);
        Ok((self.field(x, y + h)? - self.field(x, y - h)?) / (2.0 * h))
    }

    /// Interval scanned for roots.
    fn x_domain(&self) -> (f64, f64);

    /// Whether `dF/dy` keeps one strict sign on the domain, so that the
    /// manifold is the graph `y = phi(x)` given by [`CriticalField::graph_y`].
    fn is_graph(&self) -> bool {
        false
    }

    /// `phi(x)` for graph fields; `None` where `F(x, .)` has no root.
    fn graph_y(&self, _x: f64) -> Result<Option<f64>, ModelError> {
        Ok(None)
    }

    fn epsilon(&self) -> f64;

    /// Evaluates `F(xs[i], y)` for a whole grid row. `cache` is scratch space
    /// owned by the caller and tied to `xs`; implementations may keep
    /// `x`-only factors there between rows.
    fn fill_row(&self, xs: &[f64], _cache: &mut Vec<f64>, y: f64, out: &mut [f64]) -> Result<(), ModelError> {
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = self.field(x, y)?;
        }
        Ok(())
    }
}

impl DecisionParamsFull {
    /// Root of the fast field in the profit difference; the field is
    /// increasing in it whenever some inertia is below one.
    fn bisect_delta(&self, x: f64) -> Option<f64> {
        let g = |delta: f64| self.fast_at(x, delta);
        let (mut lo, mut hi) = (-1.0f64, 1.0f64);
        while g(lo) > 0.0 {
            lo *= 2.0;
            if lo < -1e6 {
                return None;
            }
        }
        while g(hi) < 0.0 {
            hi *= 2.0;
            if hi > 1e6 {
                return None;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let v = g(mid);
            if v == 0.0 {
                return Some(mid);
            }
            if v < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }

    fn sigmoids(&self, x: f64, y: f64) -> Result<(f64, f64, f64), ModelError> {
        let delta = profit_difference(State::new(x, y), self.c, self.d, self.b)?;
        let z1 = self.beta1 * (self.alpha1 + delta);
        let z2 = self.beta2 * (self.alpha2 - delta);
        Ok((logistic(z1), logistic(z2), delta))
    }
}

/// Root in `delta` of `gamma q up(delta) = down(delta)` for equal
/// sensitivities and no inertia, with `q = gamma1 (1 - x) / (gamma2 x)`.
/// With `u = e^{beta delta}` and `A = e^{-beta alpha}` this is the positive
/// root of `q A u^2 + (q - 1) u - A = 0`, taken in the cancellation-free form.
fn symmetric_delta(alpha: f64, beta: f64, q: f64) -> Option<f64> {
    if !(q > 0.0 && q.is_finite()) {
        return None;
    }
    let ln_a = -beta * alpha;
    let a = ln_a.exp();
    let disc = ((q - 1.0) * (q - 1.0) + 4.0 * q * a * a).sqrt();
    let ln_u = if q > 1.0 {
        std::f64::consts::LN_2 + ln_a - (q - 1.0 + disc).ln()
    } else {
        (1.0 - q + disc).ln() - (2.0 * q).ln() - ln_a
    };
    let delta = ln_u / beta;
    delta.is_finite().then_some(delta)
}

/// `s * (1 - s)` for `s = logistic(z)`, without cancellation.
fn logistic_slope(z: f64) -> f64 {
    logistic(z) * logistic(-z)
}

impl CriticalField for DecisionParamsFull {
    fn field(&self, x: f64, y: f64) -> Result<f64, ModelError> {
        crate::model::eval_full(State::new(x, y), self).map(|d| d.0)
    }

    fn field_dx(&self, x: f64, y: f64) -> Result<f64, ModelError> {
        let (s1, s2, delta) = self.sigmoids(x, y)?;
        let gap = self.d - x;
        let delta_x = self.c / (gap * gap);
        let ds1 = self.beta1 * logistic_slope(self.beta1 * (self.alpha1 + delta));
        let ds2 = self.beta2 * logistic_slope(self.beta2 * (self.alpha2 - delta));
        let up = self.eta1 + (1.0 - self.eta1) * s1;
        let down = self.eta2 + (1.0 - self.eta2) * s2;
        Ok(-self.gamma1 * up + self.gamma1 * (1.0 - x) * (1.0 - self.eta1) * ds1 * delta_x - self.gamma2 * down
            + self.gamma2 * x * (1.0 - self.eta2) * ds2 * delta_x)
    }

    fn field_dy(&self, x: f64, y: f64) -> Result<f64, ModelError> {
        let (_, _, delta) = self.sigmoids(x, y)?;
        let ds1 = self.beta1 * logistic_slope(self.beta1 * (self.alpha1 + delta));
        let ds2 = self.beta2 * logistic_slope(self.beta2 * (self.alpha2 - delta));
        Ok(self.gamma1 * (1.0 - x) * (1.0 - self.eta1) * ds1 + self.gamma2 * x * (1.0 - self.eta2) * ds2)
    }

    fn x_domain(&self) -> (f64, f64) {
        let a = asymptotes(self);
        (a.x_l + DOMAIN_MARGIN, a.x_r.min(self.d - DOMAIN_MARGIN) - DOMAIN_MARGIN)
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn is_graph(&self) -> bool {
        self.eta1 < 1.0 || self.eta2 < 1.0
    }

    fn graph_y(&self, x: f64) -> Result<Option<f64>, ModelError> {
        let gap = self.d - x;
        if gap.abs() < POLE_GUARD {
            return Err(ModelError::Pole { x, gap: gap.abs() });
        }
        let cost = self.c / gap - self.b;
        let symmetric = self.eta1 == 0.0
            && self.eta2 == 0.0
            && self.alpha1 == self.alpha2
            && self.beta1 == self.beta2;
        let delta = if symmetric {
            let q = self.gamma1 * (1.0 - x) / (self.gamma2 * x);
            symmetric_delta(self.alpha1, self.beta1, q)
        } else {
            self.bisect_delta(x)
        };
        Ok(delta.map(|d| d - cost))
    }

    fn fill_row(&self, xs: &[f64], cache: &mut Vec<f64>, y: f64, out: &mut [f64]) -> Result<(), ModelError> {
        // logistic(beta (alpha +- delta)) = 1 / (1 + p(x) q(y)) with the
        // exponent split into an x part (cached) and a y part (per row).
        if cache.len() != 2 * xs.len() {
            cache.clear();
            for &x in xs {
                let gap = self.d - x;
                let cost = if gap.abs() < POLE_GUARD { f64::NAN } else { self.c / gap - self.b };
                cache.push((-self.beta1 * (self.alpha1 + cost)).exp());
                cache.push((-self.beta2 * (self.alpha2 - cost)).exp());
            }
        }
        let q1 = (-self.beta1 * y).exp();
        let q2 = (self.beta2 * y).exp();
        for (i, (o, &x)) in out.iter_mut().zip(xs).enumerate() {
            let e1 = cache[2 * i] * q1;
            let e2 = cache[2 * i + 1] * q2;
            *o = if e1.is_nan() || e2.is_nan() {
                self.field(x, y)?
            } else {
                let up = self.eta1 + (1.0 - self.eta1) / (1.0 + e1);
                let down = self.eta2 + (1.0 - self.eta2) / (1.0 + e2);
                self.gamma1 * (1.0 - x) * up - self.gamma2 * x * down
            };
        }
        Ok(())
    }
}

impl CriticalField for DecisionParamsReduced {
    fn field(&self, x: f64, y: f64) -> Result<f64, ModelError> {
        crate::model::eval_reduced(State::new(x, y), self).map(|d| d.0)
    }
    fn field_dx(&self, x: f64, y: f64) -> Result<f64, ModelError> {
        self.to_full().field_dx(x, y)
    }
    fn field_dy(&self, x: f64, y: f64) -> Result<f64, ModelError> {
        self.to_full().field_dy(x, y)
    }
    fn x_domain(&self) -> (f64, f64) {
        self.to_full().x_domain()
    }
    fn is_graph(&self) -> bool {
        true
    }
    fn graph_y(&self, x: f64) -> Result<Option<f64>, ModelError> {
        self.to_full().graph_y(x)
    }
    fn epsilon(&self) -> f64 {
        self.epsilon
    }
    fn fill_row(&self, xs: &[f64], cache: &mut Vec<f64>, y: f64, out: &mut [f64]) -> Result<(), ModelError> {
        self.to_full().fill_row(xs, cache, y, out)
    }
}

impl CriticalField for NormalFormParams {
    fn field(&self, x: f64, y: f64) -> Result<f64, ModelError> {
        Ok(self.a_c * x.powi(2 * self.k as i32) + self.b_c * y)
    }
    fn field_dx(&self, x: f64, _y: f64) -> Result<f64, ModelError> {
        Ok(2.0 * f64::from(self.k) * self.a_c * x.powi(2 * self.k as i32 - 1))
    }
    fn field_dy(&self, _x: f64, _y: f64) -> Result<f64, ModelError> {
        Ok(self.b_c)
    }
    fn x_domain(&self) -> (f64, f64) {
        (-2.0, 2.0)
    }
    fn is_graph(&self) -> bool {
        self.b_c != 0.0
    }
    fn graph_y(&self, x: f64) -> Result<Option<f64>, ModelError> {
        Ok(Some(-self.a_c * x.powi(2 * self.k as i32) / self.b_c))
    }
    fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Adapter turning a closure `F(x, y)` into a [`CriticalField`].
pub struct FieldFn<F> {
    pub f: F,
    pub domain: (f64, f64),
    pub epsilon: f64,
}

impl<F: Fn(f64, f64) -> f64 + Sync> CriticalField for FieldFn<F> {
    fn field(&self, x: f64, y: f64) -> Result<f64, ModelError> {
        Ok((self.f)(x, y))
    }
    fn x_domain(&self) -> (f64, f64) {
        self.domain
    }
    fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Normal hyperbolicity type of a manifold point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Attracting,
    Repelling,
}

impl Stability {
    fn from_slope(dfdx: f64) -> Self {
        if dfdx < 0.0 {
            Self::Attracting
        } else {
            Self::Repelling
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Attracting => "attracting",
            Self::Repelling => "repelling",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifoldRoot {
    pub x: f64,
    pub stability: Stability,
}

/// Roots of `F(., y) = 0` at one slow value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSample {
    pub y: f64,
    pub roots: Vec<ManifoldRoot>,
}

/// Uniform grid over a field's scan domain, with row scratch space.
struct RowScanner<'a, F: ?Sized> {
    field: &'a F,
    xs: Vec<f64>,
    cache: Vec<f64>,
    row: Vec<f64>,
}

impl<'a, F: CriticalField + ?Sized> RowScanner<'a, F> {
    fn new(field: &'a F, cells: usize) -> Self {
        let (lo, hi) = field.x_domain();
        let cells = cells.max(1);
        let xs = (0..=cells).map(|i| lo + (hi - lo) * (i as f64 / cells as f64)).collect();
        Self { field, xs, cache: Vec::new(), row: vec![0.0; cells + 1] }
    }

    /// Sign-change brackets `(i, decreasing)` of the row at `y`; a bracket
    /// spans `xs[i]..=xs[i + 1]`, or is the exact node `xs[i]` when `F` is zero there.
    fn brackets(&mut self, y: f64) -> Result<Vec<(usize, bool)>, ModelError> {
        self.field.fill_row(&self.xs, &mut self.cache, y, &mut self.row)?;
        let v = &self.row;
        let mut out = Vec::new();
        for i in 0..v.len() {
            if v[i] == 0.0 {
                let before = if i > 0 { v[i - 1] } else { 0.0 };
                let after = v.get(i + 1).copied().unwrap_or(0.0);
                out.push((i, after < before));
            } else if i + 1 < v.len() && v[i + 1] != 0.0 && (v[i] < 0.0) != (v[i + 1] < 0.0) {
                out.push((i, v[i + 1] < v[i]));
            }
        }
        Ok(out)
    }

    /// Grid roots by linear interpolation; stability from the bracket slope.
    fn coarse_roots(&mut self, y: f64) -> Result<Vec<ManifoldRoot>, ModelError> {
        let brackets = self.brackets(y)?;
        Ok(brackets
            .into_iter()
            .map(|(i, decreasing)| {
                let (a, b) = (self.row[i], self.row.get(i + 1).copied().unwrap_or(0.0));
                let x = if a == 0.0 {
                    self.xs[i]
                } else {
                    let w = a / (a - b);
                    self.xs[i] + w * (self.xs[i + 1] - self.xs[i])
                };
                let stability = if decreasing { Stability::Attracting } else { Stability::Repelling };
                ManifoldRoot { x, stability }
            })
            .collect())
    }

    fn refined_roots(&mut self, y: f64) -> Result<Vec<ManifoldRoot>, ModelError> {
        let brackets = self.brackets(y)?;
        let mut roots = Vec::with_capacity(brackets.len());
        for (i, _) in brackets {
            let x = if self.row[i] == 0.0 {
                Some(self.xs[i])
            } else {
                bisect(self.field, y, self.xs[i], self.xs[i + 1])?
            };
            if let Some(x) = x {
                let stability = Stability::from_slope(self.field.field_dx(x, y)?);
                roots.push(ManifoldRoot { x, stability });
            }
        }
        Ok(roots)
    }
}

/// Bisection on a sign-change bracket; `None` if the exact field shows no
/// sign change there.
fn bisect<F: CriticalField + ?Sized>(field: &F, y: f64, mut a: f64, mut b: f64) -> Result<Option<f64>, ModelError> {
    let mut fa = field.field(a, y)?;
    let fb = field.field(b, y)?;
    if fa == 0.0 {
        return Ok(Some(a));
    }
    if fb == 0.0 {
        return Ok(Some(b));
    }
    if (fa < 0.0) == (fb < 0.0) {
        return Ok(None);
    }
    let mut best = if fa.abs() < fb.abs() { (a, fa.abs()) } else { (b, fb.abs()) };
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = field.field(m, y)?;
        if fm.abs() < best.1 {
            best = (m, fm.abs());
        }
        if fm == 0.0 || fm.abs() <= 1e-14 {
            break;
        }
        if (fm < 0.0) == (fa < 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Ok(Some(best.0))
}

/// All roots of `F(., y) = 0` in the scan domain, sorted by `x`.
pub fn manifold_roots<F: CriticalField + ?Sized>(
    field: &F,
    y: f64,
    grid_cells: usize,
) -> Result<ManifoldSample, ModelError> {
    let roots = RowScanner::new(field, grid_cells).refined_roots(y)?;
    Ok(ManifoldSample { y, roots })
}

/// Root samples on `levels` evenly spaced slow values.
pub fn sample_manifold<F: CriticalField + ?Sized>(
    field: &F,
    y_range: (f64, f64),
    levels: usize,
    grid_cells: usize,
) -> Result<Vec<ManifoldSample>, ModelError> {
    let mut scan = RowScanner::new(field, grid_cells);
    linspace(y_range.0, y_range.1, levels)
        .into_iter()
        .map(|y| Ok(ManifoldSample { y, roots: scan.refined_roots(y)? }))
        .collect()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * (i as f64 / (n - 1) as f64)).collect(),
    }
}

/// Fold point of the critical manifold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldPoint {
    pub x_star: f64,
    pub y_star: f64,
    /// `max(|F|, |dF/dx|)` at the refined point.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FoldError {
    #[error("fold refinement did not converge near ({x}, {y}); best residual {residual:e}")]
    NoConvergence { x: f64, y: f64, residual: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Fold search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldSearch {
    pub y_lo: f64,
    pub y_hi: f64,
    /// Slow levels compared when the field is not a graph.
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_grid")]
    pub grid_cells: usize,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
}

fn default_levels() -> usize {
    DEFAULT_LEVELS
}
fn default_grid() -> usize {
    DEFAULT_GRID_CELLS
}
fn default_newton_tol() -> f64 {
    1e-10
}

impl FoldSearch {
    pub fn new(y_lo: f64, y_hi: f64) -> Self {
        Self { y_lo, y_hi, levels: DEFAULT_LEVELS, grid_cells: DEFAULT_GRID_CELLS, newton_tol: 1e-10 }
    }
}

impl Default for FoldSearch {
    fn default() -> Self {
        Self::new(0.0, 60.0)
    }
}

/// Pairs up roots that appear or vanish between two adjacent levels.
/// Roots are matched to their nearest continuation of the same stability;
/// the unmatched ones, taken in `x` order, bracket folds.
fn vanishing_pairs(a: &[ManifoldRoot], b: &[ManifoldRoot]) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (i, ra) in a.iter().enumerate() {
        for (j, rb) in b.iter().enumerate() {
            if ra.stability == rb.stability {
                cand.push(((ra.x - rb.x).abs(), i, j));
            }
        }
    }
    cand.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    for (_, i, j) in cand {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
        }
    }
    let pairs = |roots: &[ManifoldRoot], used: &[bool]| {
        let free: Vec<f64> = roots.iter().zip(used).filter(|(_, u)| !**u).map(|(r, _)| r.x).collect();
        free.chunks_exact(2).map(|c| (c[0], c[1])).collect::<Vec<_>>()
    };
    (pairs(a, &used_a), pairs(b, &used_b))
}

/// Newton iteration on `{F = 0, dF/dx = 0}` with a finite-difference
/// second row and backtracking on the residual.
fn refine_fold<F: CriticalField + ?Sized>(field: &F, x0: f64, y0: f64, tol: f64) -> Result<FoldPoint, FoldError> {
    let (lo, hi) = field.x_domain();
    let residual = |x: f64, y: f64| -> Result<(f64, f64, f64), ModelError> {
        let f = field.field(x, y)?;
        let fx = field.field_dx(x, y)?;
        Ok((f, fx, f.abs().max(fx.abs())))
    };
    let (mut x, mut y) = (x0, y0);
    let (mut f, mut fx, mut res) = residual(x, y)?;
    for _ in 0..100 {
        if res <= tol {
            return Ok(FoldPoint { x_star: x, y_star: y, residual: res });
        }
        let hx = 1e-6 * x.abs().max(1.0);
        let hy = 1e-6 * y.abs().max(1.0);
        let fxx = (field.field_dx(x + hx, y)? - field.field_dx(x - hx, y)?) / (2.0 * hx);
        let fxy = (field.field_dx(x, y + hy)? - field.field_dx(x, y - hy)?) / (2.0 * hy);
        let fy = field.field_dy(x, y)?;
        let det = fx * fxy - fy * fxx;
        if det == 0.0 || !det.is_finite() {
            break;
        }
        let dx = (f * fxy - fy * fx) / det;
        let dy = (fx * fx - fxx * f) / det;
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let xn = (x - lambda * dx).clamp(lo, hi);
            let yn = y - lambda * dy;
            if let Ok((fn_, fxn, rn)) = residual(xn, yn) {
                if rn < res {
                    (x, y, f, fx, res) = (xn, yn, fn_, fxn, rn);
                    improved = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if res <= tol {
        Ok(FoldPoint { x_star: x, y_star: y, residual: res })
    } else {
        Err(FoldError::NoConvergence { x, y, residual: res })
    }
}

/// Fold points with `y` in the search range, sorted by `x`.
///
/// Graph fields are searched along `y = phi(x)` for sign changes of
/// `dF/dx`; other fields by comparing root patterns on `search.levels`
/// slow values.
pub fn find_folds<F: CriticalField + ?Sized>(field: &F, search: &FoldSearch) -> Result<Vec<FoldPoint>, FoldError> {
    if field.is_graph() {
        let mut folds = graph_folds(field, search.grid_cells)?;
        folds.retain(|f| f.y_star >= search.y_lo && f.y_star <= search.y_hi);
        return Ok(folds);
    }
    level_folds(field, search)
}

/// All folds of a graph field on its domain, sorted by `x`.
pub fn graph_folds<F: CriticalField + ?Sized>(field: &F, grid_cells: usize) -> Result<Vec<FoldPoint>, FoldError> {
    let slope = |x: f64| -> Result<Option<f64>, ModelError> {
        match field.graph_y(x)? {
            Some(y) => {
                let g = field.field_dx(x, y)?;
                Ok(g.is_finite().then_some(g))
            }
            None => Ok(None),
        }
    };
    let fold_at = |x: f64| -> Result<Option<FoldPoint>, ModelError> {
        let Some(y) = field.graph_y(x)? else { return Ok(None) };
        let residual = field.field(x, y)?.abs().max(field.field_dx(x, y)?.abs());
        Ok(Some(FoldPoint { x_star: x, y_star: y, residual }))
    };
    let (lo, hi) = field.x_domain();
    let n = grid_cells.max(2);
    let mut folds = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    for i in 0..=n {
        let x = lo + (hi - lo) * (i as f64 / n as f64);
        let Some(g) = slope(x)? else {
            prev = None;
            continue;
        };
        if let Some((xp, gp)) = prev {
            let root = if g == 0.0 && gp != 0.0 {
                Some(x)
            } else if gp * g < 0.0 {
                let (mut a, mut b, mut ga) = (xp, x, gp);
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    if m <= a || m >= b {
                        break;
                    }
                    match slope(m)? {
                        Some(0.0) => {
                            (a, b) = (m, m);
                            break;
                        }
                        Some(gm) if (gm < 0.0) == (ga < 0.0) => (a, ga) = (m, gm),
                        Some(_) => b = m,
                        None => break,
                    }
                }
                Some(0.5 * (a + b))
            } else {
                None
            };
            if let Some(fold) = root.map(fold_at).transpose()?.flatten() {
                folds.push(fold);
            }
        }
        prev = Some((x, g));
    }
    Ok(folds)
}

fn level_folds<F: CriticalField + ?Sized>(field: &F, search: &FoldSearch) -> Result<Vec<FoldPoint>, FoldError> {
    let ys = linspace(search.y_lo, search.y_hi, search.levels.max(2));
    let spacing = (search.y_hi - search.y_lo).abs() / (ys.len() - 1) as f64;
    let mut scan = RowScanner::new(field, search.grid_cells);
    let mut guesses = Vec::new();
    let mut prev = scan.coarse_roots(ys[0])?;
    for w in ys.windows(2) {
        let next = scan.coarse_roots(w[1])?;
        let pattern = |r: &[ManifoldRoot]| r.iter().map(|v| v.stability).collect::<Vec<_>>();
        if pattern(&prev) != pattern(&next) {
            let (pa, pb) = vanishing_pairs(&prev, &next);
            guesses.extend(pa.into_iter().map(|(l, r)| (0.5 * (l + r), w[0])));
            guesses.extend(pb.into_iter().map(|(l, r)| (0.5 * (l + r), w[1])));
        }
        prev = next;
    }
    let mut folds: Vec<FoldPoint> = Vec::new();
    for (gx, gy) in guesses {
        let fold = refine_fold(field, gx, gy, search.newton_tol)?;
        let in_range = fold.y_star >= search.y_lo.min(search.y_hi) - spacing
            && fold.y_star <= search.y_lo.max(search.y_hi) + spacing;
        let duplicate = folds
            .iter()
            .any(|f| (f.x_star - fold.x_star).abs() < 1e-7 && (f.y_star - fold.y_star).abs() < 1e-7);
        if in_range && !duplicate {
            folds.push(fold);
        }
    }
    folds.sort_by(|a, b| a.x_star.total_cmp(&b.x_star));
    Ok(folds)
}

/// Limiting shares for `y -> -inf` and `y -> +inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Asymptotes {
    pub x_l: f64,
    pub x_r: f64,
}

pub fn asymptotes(p: &DecisionParamsFull) -> Asymptotes {
    let g1e1 = p.gamma1 * p.eta1;
    Asymptotes { x_l: g1e1 / (g1e1 + p.gamma2), x_r: p.gamma1 / (p.gamma1 + p.gamma2 * p.eta2) }
}

/// Slow flow `y (1 - r x)` on a manifold branch.
pub fn reduced_slow_flow(y: f64, branch_root: f64, r: f64) -> f64 {
    y * (1.0 - r * branch_root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fig7() -> DecisionParamsReduced {
        DecisionParamsReduced { alpha: 2.0, beta: 0.75, gamma: 0.5, b: 30.0, c: 2.5, d: 1.18, r: 1.65, epsilon: 0.01 }
    }

    #[test]
    fn analytic_derivatives_match_differences() {
        let p = DecisionParamsFull { eta1: 0.1, eta2: 0.13, gamma1: 3.0, gamma2: 2.0, ..fig7().to_full() };
        for &(x, y) in &[(0.3, 27.0), (0.6, 28.7), (0.95, 25.0)] {
            let h = 1e-6;
            let fx = (p.field(x + h, y).unwrap() - p.field(x - h, y).unwrap()) / (2.0 * h);
            let fy = (p.field(x, y + h).unwrap() - p.field(x, y - h).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(p.field_dx(x, y).unwrap(), fx, epsilon = 1e-7);
            assert_abs_diff_eq!(p.field_dy(x, y).unwrap(), fy, epsilon = 1e-7);
        }
    }

    #[test]
    fn row_fill_matches_pointwise() {
        let p = fig7();
        let xs: Vec<f64> = (0..=50).map(|i| 0.001 + 0.998 * i as f64 / 50.0).collect();
        let mut cache = Vec::new();
        let mut out = vec![0.0; xs.len()];
        for y in [-40.0, 0.0, 25.0, 28.665, 60.0] {
            p.fill_row(&xs, &mut cache, y, &mut out).unwrap();
            for (&x, &v) in xs.iter().zip(&out) {
                assert_abs_diff_eq!(v, p.field(x, y).unwrap(), epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn unconditional_exploration_gives_vertical_line() {
        let p = DecisionParamsFull { eta1: 1.0, eta2: 1.0, gamma1: 3.0, gamma2: 2.0, ..fig7().to_full() };
        // x_L = x_R here, so scan the open unit interval instead.
        let field = FieldFn { f: |x, y| p.field(x, y).unwrap(), domain: (1e-6, 1.0 - 1e-6), epsilon: 0.01 };
        for y in [0.0, 20.0, 40.0] {
            let s = manifold_roots(&field, y, 2000).unwrap();
            assert_eq!(s.roots.len(), 1);
            assert_abs_diff_eq!(s.roots[0].x, 0.6, epsilon = 1e-10);
            assert_eq!(s.roots[0].stability, Stability::Attracting);
        }
    }

    #[test]
    fn roots_satisfy_tolerance_and_alternate() {
        let p = fig7();
        for y in [26.0, 27.0, 28.0, 28.6] {
            let s = manifold_roots(&p, y, 2000).unwrap();
            assert_eq!(s.roots.len() % 2, 1);
            for r in &s.roots {
                assert!(p.field(r.x, y).unwrap().abs() <= 1e-10);
            }
            for w in s.roots.windows(2) {
                assert_ne!(w[0].stability, w[1].stability);
            }
        }
    }

    #[test]
    fn folds_of_fig7() {
        let folds = find_folds(&fig7(), &FoldSearch::default()).unwrap();
        assert_eq!(folds.len(), 2);
        assert_abs_diff_eq!(folds[0].x_star, 0.6162855097580961, epsilon = 1e-8);
        assert_abs_diff_eq!(folds[0].y_star, 28.665365130124908, epsilon = 1e-8);
        assert_abs_diff_eq!(folds[1].x_star, 0.977337600678339, epsilon = 1e-8);
        assert_abs_diff_eq!(folds[1].y_star, 25.592481721184807, epsilon = 1e-8);
        assert!(folds.iter().all(|f| f.residual <= 1e-10));
    }

    #[test]
    fn level_scan_agrees_on_fig7() {
        let folds = level_folds(&fig7(), &FoldSearch::default()).unwrap();
        assert_eq!(folds.len(), 2);
        assert_abs_diff_eq!(folds[0].x_star, 0.6162855097580961, epsilon = 1e-8);
        assert_abs_diff_eq!(folds[1].y_star, 25.592481721184807, epsilon = 1e-8);
    }

    #[test]
    fn graph_roots_zero_the_field() {
        let p = fig7();
        let mut full = p.to_full();
        full.eta1 = 0.2;
        full.beta2 = 0.9;
        for x in [0.05, 0.3, 0.6162, 0.9, 0.99] {
            let y = p.graph_y(x).unwrap().unwrap();
            assert!(p.field(x, y).unwrap().abs() < 1e-12, "x {x}");
            if let Some(y) = full.graph_y(x).unwrap() {
                assert!(full.field(x, y).unwrap().abs() < 1e-12, "x {x}");
            }
        }
        assert!(symmetric_delta(2.0, 1.0, 0.0).is_none());
    }

    #[test]
    fn thin_s_bend_gives_four_folds() {
        let p = DecisionParamsReduced { alpha: 1.25, beta: 1.0, gamma: 4.25, b: 30.0, c: 3.0, d: 1.3, r: 1.6, epsilon: 0.01 };
        let folds = find_folds(&p, &FoldSearch::default()).unwrap();
        assert_eq!(folds.len(), 4);
        assert!((folds[0].y_star - folds[1].y_star).abs() < 0.05);
        assert!(folds.iter().all(|f| f.residual <= 1e-10));
    }

    #[test]
    fn normal_form_fold_at_origin() {
        let nf = NormalFormParams::new(1.0, -1.0, 1, 0.01);
        let folds = find_folds(&nf, &FoldSearch::new(-1.0, 1.0)).unwrap();
        assert_eq!(folds.len(), 1);
        assert_abs_diff_eq!(folds[0].x_star, 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(folds[0].y_star, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn asymptote_formulas() {
        let base = fig7().to_full();
        let a = asymptotes(&base);
        assert_eq!((a.x_l, a.x_r), (0.0, 1.0));
        let p = DecisionParamsFull { gamma1: 3.0, gamma2: 2.0, eta1: 0.1, eta2: 0.13, ..base };
        let a = asymptotes(&p);
        assert_abs_diff_eq!(a.x_l, 0.3 / 2.3, epsilon = 1e-15);
        assert_abs_diff_eq!(a.x_r, 3.0 / 3.26, epsilon = 1e-15);
        let p = DecisionParamsFull { eta1: 1.0, eta2: 1.0, ..p };
        let a = asymptotes(&p);
        assert_abs_diff_eq!(a.x_l, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(a.x_r, 0.6, epsilon = 1e-15);
    }

    #[test]
    fn slow_flow_signs() {
        let p = fig7();
        assert_eq!(reduced_slow_flow(12.0, 1.0 / p.r, p.r), 0.0);
        assert_eq!(reduced_slow_flow(0.0, 0.3, p.r), 0.0);
        let p = DecisionParamsReduced { r: 1.62, ..p };
        let s = manifold_roots(&p, 28.0, 2000).unwrap();
        let left = s.roots.iter().find(|r| r.stability == Stability::Attracting).unwrap();
        assert!(left.x < 1.0 / p.r);
        let flow = reduced_slow_flow(28.0, left.x, p.r);
        let (_, dy) = crate::model::eval_reduced(State::new(left.x, 28.0), &p).unwrap();
        assert!(flow > 0.0 && dy > 0.0);
    }
}
