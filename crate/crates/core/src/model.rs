//! States, parameter sets and right-hand sides of the decision model and of
//! the generalized quadratic normal form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Distance from the cost pole below which evaluation fails.
pub const POLE_GUARD: f64 = 1e-12;

/// Failure of a right-hand-side evaluation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("cost pole: |d - x| = {gap:e} at x = {x}")]
    Pole { x: f64, gap: f64 },
}

/// A parameter outside its admissible range.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{field}: {reason}")]
pub struct ParamError {
    pub field: String,
    pub reason: String,
}

impl ParamError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self { field: field.into(), reason: reason.into() }
    }

    /// Prefixes the field path, e.g. `d` becomes `system.params.d`.
    pub fn within(mut self, prefix: &str) -> Self {
        self.field = format!("{prefix}.{}", self.field);
        self
    }
}

/// Point of the (x, y) phase plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct State {
    /// Share of agents exploiting the resource.
    pub x: f64,
    /// Resource stock.
    pub y: f64,
}

impl State {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Logistic function in the branch-stable form: only `exp` of a
/// non-positive argument is ever taken.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Profit difference `y + c/(d - x) - b`.
#[inline]
pub fn profit_difference(s: State, c: f64, d: f64, b: f64) -> Result<f64, ModelError> {
    let gap = d - s.x;
    if gap.abs() < POLE_GUARD || gap.is_nan() {
        return Err(ModelError::Pole { x: s.x, gap: gap.abs() });
    }
    Ok(s.y + c / gap - b)
}

fn check(field: &str, ok: bool, reason: &str) -> Result<(), ParamError> {
    if ok {
        Ok(())
    } else {
        Err(ParamError::new(field, reason))
    }
}

fn positive(field: &str, v: f64) -> Result<(), ParamError> {
    check(field, v.is_finite() && v > 0.0, "must be finite and > 0")
}

/// Parameters of the full two-strategy model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionParamsFull {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub r: f64,
    pub epsilon: f64,
}

impl DecisionParamsFull {
    pub fn validate(&self) -> Result<(), ParamError> {
        positive("alpha1", self.alpha1)?;
        positive("alpha2", self.alpha2)?;
        positive("beta1", self.beta1)?;
        positive("beta2", self.beta2)?;
        positive("gamma1", self.gamma1)?;
        positive("gamma2", self.gamma2)?;
        for (name, eta) in [("eta1", self.eta1), ("eta2", self.eta2)] {
            check(name, (0.0..=1.0).contains(&eta), "must lie in [0, 1]")?;
        }
        check("b", self.b.is_finite() && self.b > 1.0, "must be finite and > 1")?;
        positive("c", self.c)?;
        check("d", self.d.is_finite() && self.d > 1.0, "must be finite and > 1")?;
        positive("r", self.r)?;
        positive("epsilon", self.epsilon)
    }

    /// Fast field as a function of `x` and the profit difference.
    #[inline]
    pub(crate) fn fast_at(&self, x: f64, delta: f64) -> f64 {
        let up = self.eta1 + (1.0 - self.eta1) * logistic(self.beta1 * (self.alpha1 + delta));
        let down = self.eta2 + (1.0 - self.eta2) * logistic(self.beta2 * (self.alpha2 - delta));
        self.gamma1 * (1.0 - x) * up - self.gamma2 * x * down
    }
}

/// Parameters of the reduced model (`eta1 = eta2 = 0`, `gamma = gamma1/gamma2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionParamsReduced {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub r: f64,
    /// Already rescaled by `gamma2`.
    pub epsilon: f64,
}

impl DecisionParamsReduced {
    pub fn validate(&self) -> Result<(), ParamError> {
        self.to_full().validate().map_err(|e| {
            let field = match e.field.as_str() {
                "alpha1" | "alpha2" => "alpha",
                "beta1" | "beta2" => "beta",
                "gamma1" | "gamma2" => "gamma",
                other => other,
            };
            ParamError::new(field, e.reason)
        })
    }

    /// The equivalent full parameter set.
    pub fn to_full(&self) -> DecisionParamsFull {
        DecisionParamsFull {
            alpha1: self.alpha,
            alpha2: self.alpha,
            beta1: self.beta,
            beta2: self.beta,
            gamma1: self.gamma,
            gamma2: 1.0,
            eta1: 0.0,
            eta2: 0.0,
            b: self.b,
            c: self.c,
            d: self.d,
            r: self.r,
            epsilon: self.epsilon,
        }
    }

    /// Sets a parameter by name; used by sweeps and config overrides.
    pub fn set(&mut self, name: &str, value: f64) -> Result<(), ParamError> {
        let slot = match name {
            "alpha" => &mut self.alpha,
            "beta" => &mut self.beta,
            "gamma" => &mut self.gamma,
            "b" => &mut self.b,
            "c" => &mut self.c,
            "d" => &mut self.d,
            "r" => &mut self.r,
            "epsilon" => &mut self.epsilon,
            _ => return Err(ParamError::new(name, "unknown parameter")),
        };
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "alpha" => self.alpha,
            "beta" => self.beta,
            "gamma" => self.gamma,
            "b" => self.b,
            "c" => self.c,
            "d" => self.d,
            "r" => self.r,
            "epsilon" => self.epsilon,
            _ => return None,
        })
    }
}

/// Right-hand side of the full model in fast time.
pub fn eval_full(s: State, p: &DecisionParamsFull) -> Result<(f64, f64), ModelError> {
    let delta = profit_difference(s, p.c, p.d, p.b)?;
    Ok((p.fast_at(s.x, delta), p.epsilon * s.y * (1.0 - p.r * s.x)))
}

/// Right-hand side of the reduced model; bitwise equal to [`eval_full`] on
/// [`DecisionParamsReduced::to_full`].
pub fn eval_reduced(s: State, p: &DecisionParamsReduced) -> Result<(f64, f64), ModelError> {
    eval_full(s, &p.to_full())
}

/// Generalized quadratic normal form at a fold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalFormParams {
    pub a_c: f64,
    pub b_c: f64,
    /// Contact order.
    pub k: u32,
    /// `sign(a_c * b_c)`.
    pub sigma: f64,
    pub epsilon: f64,
    /// Constant slow offset; zero when compensated.
    pub slow_offset: f64,
}

impl NormalFormParams {
    pub fn new(a_c: f64, b_c: f64, k: u32, epsilon: f64) -> Self {
        Self { a_c, b_c, k, sigma: (a_c * b_c).signum(), epsilon, slow_offset: 0.0 }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        check("a_c", self.a_c.is_finite() && self.a_c != 0.0, "must be finite and nonzero")?;
        check("b_c", self.b_c.is_finite() && self.b_c != 0.0, "must be finite and nonzero")?;
        check("k", self.k >= 1 && self.k <= 16, "must lie in 1..=16")?;
        check(
            "sigma",
            self.sigma == (self.a_c * self.b_c).signum(),
            "must equal sign(a_c * b_c)",
        )?;
        positive("epsilon", self.epsilon)?;
        check("slow_offset", self.slow_offset.is_finite(), "must be finite")
    }

    /// Coefficients after an additive perturbation; `sigma` and `k` are kept.
    pub fn perturbed(&self, pert: &PerturbationSpec) -> Self {
        Self { a_c: self.a_c + pert.delta_a, b_c: self.b_c + pert.delta_b, ..*self }
    }
}

/// Additive perturbation of the normal-form coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub delta_a: f64,
    pub delta_b: f64,
}

impl PerturbationSpec {
    /// Difference between a perturbed and a nominal expansion.
    pub fn between(nominal: &NormalFormParams, perturbed: &NormalFormParams) -> Self {
        Self { delta_a: perturbed.a_c - nominal.a_c, delta_b: perturbed.b_c - nominal.b_c }
    }
}

pub fn eval_normal_form(s: State, nf: &NormalFormParams) -> (f64, f64) {
    let k = nf.k as i32;
    let fast = nf.a_c * s.x.powi(2 * k) + nf.b_c * s.y;
    let slow = -nf.epsilon * (nf.sigma * f64::from(nf.k) * nf.a_c * s.x.powi(2 * k - 1) - nf.slow_offset);
    (fast, slow)
}

pub fn eval_perturbed_normal_form(
    s: State,
    nf: &NormalFormParams,
    pert: &PerturbationSpec,
) -> (f64, f64) {
    eval_normal_form(s, &nf.perturbed(pert))
}

/// Kind of a logged integration event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Switch,
    RegionExit,
    RegionEntry,
    Failure,
}

/// Timestamped entry of a trajectory's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
    pub message: String,
}

/// Values reported by a controlled system at a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Index of the active controller.
    pub controller: usize,
    /// Whether the controller acted (inside its validity region).
    pub active: bool,
    pub u: f64,
    pub v: f64,
    /// Controller Hamiltonian; may over- or underflow.
    pub hamiltonian: f64,
    /// `ln |H|`, finite where `hamiltonian` is not.
    pub log_abs_hamiltonian: f64,
    /// `ln |H - h|`.
    pub log_abs_level_error: f64,
    /// Log of the size of the terms making up `H`, the scale against
    /// which rounding and truncation in `H - h` are judged.
    pub log_hamiltonian_scale: f64,
}

impl Observation {
    /// `|H - h|` (may underflow).
    pub fn abs_level_error(&self) -> f64 {
        self.log_abs_level_error.exp()
    }
}

/// Planar system `x' = F(x, y)`, `y' = eps * G(x, y)` in fast time.
///
/// Systems with scheduled mode changes report their switch times; the
/// integrator ends a step exactly on each and then calls [`on_switch`].
///
/// [`on_switch`]: FastSlowSystem::on_switch
pub trait FastSlowSystem {
    /// `(dx/dt, dy/dt)`.
    fn rhs(&self, t: f64, s: State) -> Result<(f64, f64), ModelError>;

    /// Fast component alone, used by the layer problem.
    fn fast(&self, t: f64, s: State) -> Result<f64, ModelError> {
        self.rhs(t, s).map(|d| d.0)
    }

    /// Restores the initial mode; called when an integration starts.
    fn reset(&mut self) {}

    /// Scheduled switch times, strictly increasing.
    fn switch_times(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Applies switch `index` of [`switch_times`](FastSlowSystem::switch_times)
    /// at time `t`; returns a log message.
    fn on_switch(&mut self, _index: usize, _t: f64, _s: State) -> Option<String> {
        None
    }

    /// Called after every accepted step; returns events to log.
    fn after_step(&mut self, _t: f64, _s: State) -> Option<(EventKind, String)> {
        None
    }

    /// Control values at a sample, if the system is controlled.
    fn observe(&self, _t: f64, _s: State) -> Option<Observation> {
        None
    }
}

impl FastSlowSystem for DecisionParamsFull {
    fn rhs(&self, _t: f64, s: State) -> Result<(f64, f64), ModelError> {
        eval_full(s, self)
    }
}

impl FastSlowSystem for DecisionParamsReduced {
    fn rhs(&self, _t: f64, s: State) -> Result<(f64, f64), ModelError> {
        eval_reduced(s, self)
    }
}

impl FastSlowSystem for NormalFormParams {
    fn rhs(&self, _t: f64, s: State) -> Result<(f64, f64), ModelError> {
        Ok(eval_normal_form(s, self))
    }
}

/// Normal form with perturbed coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbedNormalForm {
    pub nf: NormalFormParams,
    pub pert: PerturbationSpec,
}

impl FastSlowSystem for PerturbedNormalForm {
    fn rhs(&self, _t: f64, s: State) -> Result<(f64, f64), ModelError> {
        Ok(eval_perturbed_normal_form(s, &self.nf, &self.pert))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn fig7() -> DecisionParamsReduced {
        DecisionParamsReduced {
            alpha: 2.0,
            beta: 0.75,
            gamma: 0.5,
            b: 30.0,
            c: 2.5,
            d: 1.18,
            r: 1.65,
            epsilon: 0.01,
        }
    }

    #[test]
    fn profit_difference_examples() {
        let (c, d, b) = (2.5, 1.18, 30.0);
        assert_abs_diff_eq!(profit_difference(State::new(0.0, b - c / d), c, d, b).unwrap(), 0.0);
        let v = profit_difference(State::new(0.6152, 28.665), c, d, b).unwrap();
        assert_abs_diff_eq!(v, 28.665 + 2.5 / (1.18 - 0.6152) - 30.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 3.0914, epsilon = 1e-3);
        assert!(matches!(
            profit_difference(State::new(d, 1.0), c, d, b),
            Err(ModelError::Pole { .. })
        ));
        assert!(profit_difference(State::new(d - 1e-9, 1.0), c, d, b).unwrap() > 1e9);
    }

    #[test]
    fn full_with_unconditional_exploration_is_linear() {
        let p = DecisionParamsFull { eta1: 1.0, eta2: 1.0, ..fig7().to_full() };
        let p = DecisionParamsFull { gamma1: 3.0, gamma2: 2.0, ..p };
        for y in [0.0, 10.0, 28.0] {
            let x0 = 3.0 / 5.0;
            assert_abs_diff_eq!(eval_full(State::new(x0, y), &p).unwrap().0, 0.0, epsilon = 1e-15);
            let x = 0.2;
            assert_abs_diff_eq!(
                eval_full(State::new(x, y), &p).unwrap().0,
                3.0 * (1.0 - x) - 2.0 * x,
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn slow_component_vanishes() {
        let p = fig7();
        assert_eq!(eval_reduced(State::new(1.0 / p.r, 12.0), &p).unwrap().1, 0.0);
        assert_eq!(eval_reduced(State::new(0.3, 0.0), &p).unwrap().1, 0.0);
    }

    #[test]
    fn fold_of_fig7_is_near_manifold() {
        let (f, _) = eval_reduced(State::new(0.6152, 28.665), &fig7()).unwrap();
        assert!(f.abs() <= 1e-3);
    }

    #[test]
    fn saturation_limit() {
        let p = fig7();
        let x = 0.4;
        let (f, _) = eval_reduced(State::new(x, 1e4), &p).unwrap();
        assert_abs_diff_eq!(f, p.gamma * (1.0 - x), epsilon = 1e-12);
    }

    #[test]
    fn logistic_is_stable() {
        assert_eq!(logistic(1e4), 1.0);
        assert_eq!(logistic(-1e4), 0.0);
        assert!(logistic(-700.0) > 0.0);
        assert_abs_diff_eq!(logistic(0.0), 0.5);
    }

    #[test]
    fn normal_form_examples() {
        let nf = NormalFormParams::new(2.0, 3.0, 2, 0.01);
        assert_eq!(eval_normal_form(State::new(0.0, 0.0), &nf), (0.0, 0.0));
        let (f, g) = eval_normal_form(State::new(1.0, -0.3), &nf);
        assert_abs_diff_eq!(f, 1.1, epsilon = 1e-15);
        assert_abs_diff_eq!(g, -0.04, epsilon = 1e-15);

        let classic = NormalFormParams::new(1.0, -1.0, 1, 0.01);
        assert_eq!(classic.sigma, -1.0);
        let (f, g) = eval_normal_form(State::new(1.0, 1.0), &classic);
        assert_eq!(f, 0.0);
        assert_abs_diff_eq!(g, -0.01 * classic.sigma, epsilon = 1e-18);
    }

    #[test]
    fn perturbed_normal_form() {
        let nf = NormalFormParams::new(2.0, 3.0, 2, 0.01);
        let s = State::new(0.7, -0.2);
        assert_eq!(eval_perturbed_normal_form(s, &nf, &PerturbationSpec::default()), eval_normal_form(s, &nf));
        let p = nf.perturbed(&PerturbationSpec { delta_a: -0.5, delta_b: 0.5 });
        assert_eq!((p.a_c, p.b_c), (1.5, 3.5));
        let p = nf.perturbed(&PerturbationSpec { delta_a: 0.1, delta_b: 0.5 });
        assert_abs_diff_eq!(p.a_c, 2.1, epsilon = 1e-15);
        assert_eq!(p.sigma, nf.sigma);
    }

    #[test]
    fn validation_names_fields() {
        let mut p = fig7();
        p.d = 1.0;
        assert_eq!(p.validate().unwrap_err().field, "d");
        let mut p = fig7();
        p.gamma = 0.0;
        assert_eq!(p.validate().unwrap_err().field, "gamma");
        assert!(fig7().validate().is_ok());
        let mut nf = NormalFormParams::new(1.0, 1.0, 1, 0.01);
        nf.sigma = -1.0;
        assert_eq!(nf.validate().unwrap_err().field, "sigma");
    }
}
