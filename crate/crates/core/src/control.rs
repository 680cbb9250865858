//! Hamiltonian level sets of the normal form, compatible fast and fast-slow
//! controllers, perturbation robustness and scheduled closed loops.
//!
//! A controller targets the level `H = h` with
//! `H = (s/2) e^{2 dy/(s eps)} (b dy/eps + a X^{2k}/eps - s b/2)`, where
//! `X = x - x_c`, `dy = y - y_star` and `s = sign(a b)`. Control laws use the
//! scaled residual `S = eps (H - h) e^{-2 dy/(s eps)}`, which stays O(1)
//! where `H` and `h` themselves overflow or underflow.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrate::Trajectory;
use crate::model::{
    EventKind, FastSlowSystem, ModelError, NormalFormParams, Observation, ParamError, PerturbationSpec, State,
};

/// Largest admissible `|2 dy/(s eps)|`.
pub const MAX_EXPONENT: f64 = 700.0;
/// Slow control is gated off for `y` at or below this value.
pub const Y_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("exponent {0:.3} outside +-{MAX_EXPONENT}")]
    Overflow(f64),
    #[error("outside validity region: {0}")]
    OutsideValidity(Outside),
    #[error("invalid controller: {0}")]
    Param(#[from] ParamError),
}

/// Reason a state lies outside a controller's validity region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outside {
    Exponent,
    Radius,
    Residual,
}

impl std::fmt::Display for Outside {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Exponent => "level exponent out of range",
            Self::Radius => "too far from the center",
            Self::Residual => "level residual term too large",
        })
    }
}

/// Target level `h = sign * exp(log_magnitude)`, kept in log form so that
/// levels far below the smallest double stay usable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetLevel {
    pub sign: f64,
    pub log_magnitude: f64,
}

impl TargetLevel {
    /// The maximal-canard level `h = 0`.
    pub const ZERO: Self = Self { sign: 0.0, log_magnitude: f64::NEG_INFINITY };

    pub fn value(&self) -> f64 {
        if self.sign == 0.0 {
            0.0
        } else {
            self.sign * self.log_magnitude.exp()
        }
    }

    /// True when the level is nonzero but rounds to a zero double.
    pub fn underflows(&self) -> bool {
        self.sign != 0.0 && self.value() == 0.0
    }
}

/// `h = -(1/4) sign(b_c) e^{-c_c/eps}`.
pub fn target_h(nf: &NormalFormParams, c_c: f64) -> Result<TargetLevel, ControlError> {
    if !(c_c.is_finite() && c_c > 0.0) {
        return Err(ParamError::new("c_c", "must be finite and > 0").into());
    }
    Ok(TargetLevel { sign: -nf.b_c.signum(), log_magnitude: 0.25f64.ln() - c_c / nf.epsilon })
}

#[inline]
fn level_exponent(nf: &NormalFormParams, dy: f64) -> f64 {
    2.0 * dy / (nf.sigma * nf.epsilon)
}

/// `b dy + a X^{2k} - s b eps/2`, i.e. `eps` times the Hamiltonian bracket.
#[inline]
fn bracket(a: f64, b: f64, nf: &NormalFormParams, x: f64, dy: f64) -> f64 {
    b * dy + a * x.powi(2 * nf.k as i32) - nf.sigma * b * nf.epsilon / 2.0
}

fn checked_exponent(nf: &NormalFormParams, dy: f64) -> Result<f64, ControlError> {
    let e = level_exponent(nf, dy);
    if e.abs() > MAX_EXPONENT || e.is_nan() {
        Err(ControlError::Overflow(e))
    } else {
        Ok(e)
    }
}

fn hamiltonian_with(a: f64, b: f64, s: State, nf: &NormalFormParams, origin: State) -> Result<f64, ControlError> {
    let dy = s.y - origin.y;
    let e = checked_exponent(nf, dy)?;
    Ok(nf.sigma / 2.0 * e.exp() * bracket(a, b, nf, s.x - origin.x, dy) / nf.epsilon)
}

/// Classic canard Hamiltonian `(1/2) e^{-2y/eps} (y/eps - x^2/eps + 1/2)`.
pub fn hamiltonian_classic(s: State, eps: f64) -> Result<f64, ControlError> {
    let e = -2.0 * s.y / eps;
    if e.abs() > MAX_EXPONENT || e.is_nan() {
        return Err(ControlError::Overflow(e));
    }
    Ok(0.5 * e.exp() * (s.y / eps - s.x * s.x / eps + 0.5))
}

/// Normal-form Hamiltonian centered at `origin`.
pub fn hamiltonian_general(s: State, nf: &NormalFormParams, origin: State) -> Result<f64, ControlError> {
    hamiltonian_with(nf.a_c, nf.b_c, s, nf, origin)
}

/// Hamiltonian of the perturbed normal form, in normal-form coordinates.
pub fn hamiltonian_perturbed(s: State, nf: &NormalFormParams, pert: &PerturbationSpec) -> Result<f64, ControlError> {
    hamiltonian_with(nf.a_c + pert.delta_a, nf.b_c + pert.delta_b, s, nf, State::new(0.0, 0.0))
}

/// Perturbation part `H_delta = H_p - H`.
pub fn hamiltonian_delta(s: State, nf: &NormalFormParams, pert: &PerturbationSpec) -> Result<f64, ControlError> {
    hamiltonian_with(pert.delta_a, pert.delta_b, s, nf, State::new(0.0, 0.0))
}

/// `(H - h)^2 / 2`.
pub fn lyapunov_value(s: State, nf: &NormalFormParams, origin: State, h: &TargetLevel) -> Result<f64, ControlError> {
    let e = (hamiltonian_general(s, nf, origin)? - h.value()).abs();
    Ok(0.5 * e * e)
}

/// Bounds outside which a controller switches itself off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidityRegion {
    /// Bound on `|2 dy/(s eps)|`.
    #[serde(default = "default_max_exponent")]
    pub max_exponent: f64,
    /// Bound on `|X|`; `null` in JSON for none.
    #[serde(default = "default_radius", with = "optional_bound")]
    pub x_radius: f64,
    /// Bound on the residual term `eps |h| e^{-2 dy/(s eps)}`; `null` for none.
    #[serde(default = "default_residual", with = "optional_bound")]
    pub max_residual: f64,
}

fn default_max_exponent() -> f64 {
    MAX_EXPONENT
}
fn default_radius() -> f64 {
    0.5
}
fn default_residual() -> f64 {
    1.0
}

/// Infinite bounds serialize as `null`.
mod optional_bound {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl Default for ValidityRegion {
    fn default() -> Self {
        Self { max_exponent: MAX_EXPONENT, x_radius: 0.5, max_residual: 1.0 }
    }
}

impl ValidityRegion {
    /// No radius or residual bound; only the overflow guard.
    pub fn unbounded() -> Self {
        Self { max_exponent: MAX_EXPONENT, x_radius: f64::INFINITY, max_residual: f64::INFINITY }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if !(self.max_exponent > 0.0 && self.max_exponent <= MAX_EXPONENT) {
            return Err(ParamError::new("max_exponent", format!("must lie in (0, {MAX_EXPONENT}]")));
        }
        if !(self.x_radius > 0.0) {
            return Err(ParamError::new("x_radius", "must be > 0"));
        }
        if !(self.max_residual > 0.0) {
            return Err(ParamError::new("max_residual", "must be > 0"));
        }
        Ok(())
    }
}

/// Pieces of the level error at one state.
#[derive(Debug, Clone, Copy)]
struct Level {
    /// `2 dy/(s eps)`.
    exponent: f64,
    /// `(s/2) (b dy + a X^{2k} - s b eps/2)`.
    poly: f64,
    /// `ln(eps |h|) - exponent`.
    log_residual: f64,
}

impl Level {
    fn at(nf: &NormalFormParams, h: &TargetLevel, x: f64, dy: f64) -> Self {
        let exponent = level_exponent(nf, dy);
        let poly = nf.sigma / 2.0 * bracket(nf.a_c, nf.b_c, nf, x, dy);
        let log_residual = nf.epsilon.ln() + h.log_magnitude - exponent;
        Self { exponent, poly, log_residual }
    }

    fn check(&self, region: &ValidityRegion, x: f64) -> Result<(), Outside> {
        if !(self.exponent.abs() <= region.max_exponent) {
            return Err(Outside::Exponent);
        }
        if !(x.abs() <= region.x_radius) {
            return Err(Outside::Radius);
        }
        if self.log_residual > region.max_residual.ln() || self.log_residual > MAX_EXPONENT {
            return Err(Outside::Residual);
        }
        Ok(())
    }

    /// `S = eps (H - h) e^{-exponent}`.
    fn scaled_error(&self, h: &TargetLevel) -> f64 {
        if h.sign == 0.0 {
            self.poly
        } else {
            self.poly - h.sign * self.log_residual.exp()
        }
    }

    /// `ln |H|` and `ln |H - h|`, from `S` and the exponent.
    fn logs(&self, h: &TargetLevel, eps: f64) -> (f64, f64) {
        let ln_eps = eps.ln();
        (self.poly.abs().ln() - ln_eps + self.exponent, self.scaled_error(h).abs().ln() - ln_eps + self.exponent)
    }

    /// `ln` of `(1/2) e^E (|b dy| + |a X^{2k}| + |b| eps/2) / eps`.
    fn log_scale(nf: &NormalFormParams, exponent: f64, x: f64, dy: f64) -> f64 {
        let terms = (nf.b_c * dy).abs() + (nf.a_c * x.powi(2 * nf.k as i32)).abs() + nf.b_c.abs() * nf.epsilon / 2.0;
        (0.5 * terms / nf.epsilon).ln() + exponent
    }
}

/// Scaled residual `S = eps (H - h) e^{-2 dy/(s eps)}`.
pub fn level_residual(s: State, nf: &NormalFormParams, origin: State, h: &TargetLevel) -> f64 {
    Level::at(nf, h, s.x - origin.x, s.y - origin.y).scaled_error(h)
}

fn gain_factor(nf: &NormalFormParams, gain: f64, x: f64) -> f64 {
    -(gain * x) / (nf.sigma * f64::from(nf.k) * nf.a_c)
}

/// Fast control in factored form,
/// `u = -(B X/(s k a)) [ (s/2)(b dy + a X^{2k} - s b eps/2) - eps h e^{-2 dy/(s eps)} ]`.
pub fn fast_control_u(
    s: State,
    nf: &NormalFormParams,
    origin: State,
    gain: f64,
    h: &TargetLevel,
    region: &ValidityRegion,
) -> Result<f64, ControlError> {
    let x = s.x - origin.x;
    let level = Level::at(nf, h, x, s.y - origin.y);
    level.check(region, x).map_err(ControlError::OutsideValidity)?;
    Ok(gain_factor(nf, gain, x) * level.scaled_error(h))
}

/// Fast control recentred on the slow equilibrium `x = 1/r`.
pub fn fast_control_shifted(
    s: State,
    nf: &NormalFormParams,
    origin: State,
    gain: f64,
    h: &TargetLevel,
    r: f64,
    region: &ValidityRegion,
) -> Result<f64, ControlError> {
    let center = State::new(1.0 / r, origin.y);
    let core = fast_control_u(s, nf, center, gain, h, region)?;
    let p = 2 * nf.k as i32;
    Ok(-nf.a_c * (s.x - origin.x).powi(p) + nf.a_c * (s.x - center.x).powi(p) + core)
}

/// Joint fast-slow control: fast part centred at the fold and the constant
/// slow input `v = -(1 - r x_star)`.
pub fn joint_fast_slow(
    s: State,
    nf: &NormalFormParams,
    origin: State,
    gain: f64,
    h: &TargetLevel,
    r: f64,
    region: &ValidityRegion,
) -> Result<(f64, f64), ControlError> {
    let u = fast_control_u(s, nf, origin, gain, h, region)?;
    let v = if s.y > Y_FLOOR { -(1.0 - r * origin.x) } else { 0.0 };
    Ok((u, v))
}

/// Outcome of the perturbation robustness test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Robustness {
    Satisfied,
    Violated,
    /// The test is only defined for `delta_b > 0`.
    NotApplicable,
}

/// `s delta_a < delta_b |a_c/b_c|`, for `delta_b > 0`.
pub fn robustness_check(nf: &NormalFormParams, pert: &PerturbationSpec) -> Robustness {
    if !(pert.delta_b > 0.0) {
        return Robustness::NotApplicable;
    }
    if nf.sigma * pert.delta_a < pert.delta_b * (nf.a_c / nf.b_c).abs() {
        Robustness::Satisfied
    } else {
        Robustness::Violated
    }
}

/// Control law of a controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlLaw {
    /// Fast input only, level set centred at the fold.
    FastOnly,
    /// Fast input only, level set centred at `x = 1/r`.
    FastOnlyShifted,
    /// Fast input centred at the fold plus constant slow input.
    FastSlow,
}

/// A fully resolved controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub name: String,
    pub law: ControlLaw,
    /// Fold location `(x_star, y_star)`.
    pub origin: State,
    pub normal_form: NormalFormParams,
    /// Gain `B_c`.
    pub gain: f64,
    /// Level exponent `c_c`.
    pub c_c: f64,
    pub level: TargetLevel,
    /// Harvesting rate for the shifted and fast-slow laws.
    pub r: Option<f64>,
    pub validity: ValidityRegion,
}

/// Controller output at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub u: f64,
    pub v: f64,
    pub active: Result<(), Outside>,
    pub observation: Observation,
}

impl Controller {
    pub fn new(
        name: impl Into<String>,
        law: ControlLaw,
        origin: State,
        normal_form: NormalFormParams,
        gain: f64,
        c_c: f64,
        r: Option<f64>,
        validity: ValidityRegion,
    ) -> Result<Self, ControlError> {
        normal_form.validate().map_err(|e| e.within("normal_form"))?;
        validity.validate().map_err(|e| e.within("validity"))?;
        if !(gain.is_finite() && gain > 0.0) {
            return Err(ParamError::new("gain", "must be finite and > 0").into());
        }
        let level = target_h(&normal_form, c_c)?;
        if law != ControlLaw::FastOnly && !r.is_some_and(|r| r.is_finite() && r > 0.0) {
            return Err(ParamError::new("r", "required (> 0) by this control law").into());
        }
        if law == ControlLaw::FastSlow && origin.y <= 100.0 * Y_FLOOR {
            return Err(ParamError::new("origin.y", "fold too close to y = 0 for slow control").into());
        }
        Ok(Self { name: name.into(), law, origin, normal_form, gain, c_c, level, r, validity })
    }

    /// Centre of the targeted level set.
    pub fn center(&self) -> State {
        match (self.law, self.r) {
            (ControlLaw::FastOnlyShifted, Some(r)) => State::new(1.0 / r, self.origin.y),
            _ => self.origin,
        }
    }

    pub fn output(&self, s: State) -> ControlOutput {
        let nf = &self.normal_form;
        let center = self.center();
        let x = s.x - center.x;
        let level = Level::at(nf, &self.level, x, s.y - center.y);
        let active = level.check(&self.validity, x);
        let (log_h, log_err) = level.logs(&self.level, nf.epsilon);
        let (u, v) = if active.is_ok() {
            let core = gain_factor(nf, self.gain, x) * level.scaled_error(&self.level);
            let r = self.r.unwrap_or(f64::NAN);
            match self.law {
                ControlLaw::FastOnly => (core, 0.0),
                ControlLaw::FastOnlyShifted => {
                    let p = 2 * nf.k as i32;
                    (-nf.a_c * (s.x - self.origin.x).powi(p) + nf.a_c * x.powi(p) + core, 0.0)
                }
                ControlLaw::FastSlow => (core, if s.y > Y_FLOOR { -(1.0 - r * self.origin.x) } else { 0.0 }),
            }
        } else {
            (0.0, 0.0)
        };
        let hamiltonian = nf.sigma / 2.0 * level.exponent.exp() * 2.0 * level.poly / (nf.sigma * nf.epsilon);
        ControlOutput {
            u,
            v,
            active,
            observation: Observation {
                controller: 0,
                active: active.is_ok(),
                u,
                v,
                hamiltonian,
                log_abs_hamiltonian: log_h,
                log_abs_level_error: log_err,
                log_hamiltonian_scale: Level::log_scale(nf, level.exponent, x, s.y - center.y),
            },
        }
    }

    /// Points `(x, y)` of the target level curve, sampled on `n` slow values
    /// inside the validity exponent range; two points per level.
    pub fn level_curve(&self, n: usize) -> Vec<(f64, f64)> {
        let nf = &self.normal_form;
        let center = self.center();
        let span = self.validity.max_exponent * nf.epsilon / 2.0;
        let p = 2.0 * f64::from(nf.k);
        let mut pts = Vec::new();
        for i in 0..n {
            let dy = -span + 2.0 * span * (i as f64 / (n.max(2) - 1) as f64);
            let lvl = Level::at(nf, &self.level, 0.0, dy);
            if lvl.log_residual > MAX_EXPONENT {
                continue;
            }
            // a X^{2k} = 2 s eps h e^{-E} - b dy + s b eps/2
            let rhs = 2.0 * nf.sigma * self.level.sign * lvl.log_residual.exp() - nf.b_c * dy
                + nf.sigma * nf.b_c * nf.epsilon / 2.0;
            let q = rhs / nf.a_c;
            if q >= 0.0 && q.is_finite() {
                let xr = q.powf(1.0 / p);
                pts.push((center.x - xr, center.y + dy));
                pts.push((center.x + xr, center.y + dy));
            }
        }
        pts
    }
}

/// Scheduled controller change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Switch {
    pub t: f64,
    /// Controller name, or `None` for open loop.
    pub controller: Option<String>,
}

/// Initial mode plus timed switches.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default)]
    pub initial: Option<String>,
    #[serde(default)]
    pub switches: Vec<Switch>,
}

impl Schedule {
    pub fn constant(controller: Option<&str>) -> Self {
        Self { initial: controller.map(str::to_owned), switches: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        for (i, w) in self.switches.iter().enumerate() {
            if !w.t.is_finite() {
                return Err(ParamError::new(format!("switches[{i}].t"), "must be finite"));
            }
            if i > 0 && w.t <= self.switches[i - 1].t {
                return Err(ParamError::new(format!("switches[{i}].t"), "times must be strictly increasing"));
            }
        }
        Ok(())
    }
}

/// Plant with scheduled controllers. Fast input is added to `dx/dt`; the
/// slow input enters as `eps * y * v` so that it vanishes on `y = 0`.
#[derive(Debug, Clone)]
pub struct ClosedLoop<P> {
    pub plant: P,
    pub controllers: Vec<Controller>,
    initial: Option<usize>,
    switches: Vec<(f64, Option<usize>)>,
    active: Option<usize>,
    inside: Option<bool>,
}

impl<P: FastSlowSystem> ClosedLoop<P> {
    pub fn new(plant: P, controllers: Vec<Controller>, schedule: &Schedule) -> Result<Self, ControlError> {
        schedule.validate().map_err(|e| e.within("schedule"))?;
        let resolve = |name: &Option<String>, field: &str| -> Result<Option<usize>, ControlError> {
            match name {
                None => Ok(None),
                Some(n) => controllers
                    .iter()
                    .position(|c| &c.name == n)
                    .map(Some)
                    .ok_or_else(|| ParamError::new(field, format!("unknown controller {n:?}")).into()),
            }
        };
        let initial = resolve(&schedule.initial, "schedule.initial")?;
        let switches = schedule
            .switches
            .iter()
            .enumerate()
            .map(|(i, w)| Ok((w.t, resolve(&w.controller, &format!("schedule.switches[{i}].controller"))?)))
            .collect::<Result<Vec<_>, ControlError>>()?;
        Ok(Self { plant, controllers, initial, switches, active: initial, inside: None })
    }

    /// Active controller index.
    pub fn active(&self) -> Option<usize> {
        self.active
    }

    fn output(&self, s: State) -> Option<ControlOutput> {
        self.active.map(|i| {
            let mut out = self.controllers[i].output(s);
            out.observation.controller = i;
            out
        })
    }

    fn describe(&self) -> String {
        match self.active {
            Some(i) => format!("controller {} on", self.controllers[i].name),
            None => "control off".to_owned(),
        }
    }
}

impl<P: FastSlowSystem> FastSlowSystem for ClosedLoop<P> {
    fn rhs(&self, t: f64, s: State) -> Result<(f64, f64), ModelError> {
        let (f, g) = self.plant.rhs(t, s)?;
        match self.output(s) {
            Some(out) if out.active.is_ok() => {
                let eps = self.controllers[out.observation.controller].normal_form.epsilon;
                let g = if out.v == 0.0 { g } else { g + eps * s.y * out.v };
                Ok((f + out.u, g))
            }
            _ => Ok((f, g)),
        }
    }

    fn fast(&self, t: f64, s: State) -> Result<f64, ModelError> {
        self.rhs(t, s).map(|d| d.0)
    }

    fn reset(&mut self) {
        self.active = self.initial;
        self.inside = None;
    }

    fn switch_times(&self) -> Vec<f64> {
        self.switches.iter().map(|w| w.0).collect()
    }

    fn on_switch(&mut self, index: usize, _t: f64, _s: State) -> Option<String> {
        self.active = self.switches[index].1;
        self.inside = None;
        Some(self.describe())
    }

    fn after_step(&mut self, _t: f64, s: State) -> Option<(EventKind, String)> {
        let out = self.output(s)?;
        let inside = out.active.is_ok();
        let was = self.inside.replace(inside);
        let name = &self.controllers[out.observation.controller].name;
        match (was, out.active) {
            (Some(true) | None, Err(why)) => Some((EventKind::RegionExit, format!("{name}: {why}"))),
            (Some(false), Ok(())) => Some((EventKind::RegionEntry, format!("{name}: back in region"))),
            _ => None,
        }
    }

    fn observe(&self, _t: f64, s: State) -> Option<Observation> {
        self.output(s).map(|o| o.observation)
    }
}

/// Closed-loop convergence summary computed from sampled observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub tolerance: f64,
    /// First sample time with `|H - h| < tolerance`.
    pub time_to_tolerance: Option<f64>,
    /// Sample pairs, same controller, where `|H - h|` grew by more than the slack.
    pub monotonicity_violations: usize,
    pub region_exits: usize,
    pub final_abs_level_error: Option<f64>,
    /// `max |H - h|` over samples in the second half of the run.
    pub late_max_abs_level_error: Option<f64>,
    /// `max |S|` over samples in the second half of the run.
    pub late_max_scaled_error: Option<f64>,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

/// Summarizes a closed-loop trajectory.
///
/// A monotonicity violation is a step where `|H - h|` increased by more than
/// `slack` times the size of the terms of `H` (or `|h|`, if larger) between
/// consecutive samples with the same active controller.
pub fn convergence_report(
    traj: &Trajectory,
    controllers: &[Controller],
    tolerance: f64,
    slack: f64,
) -> ConvergenceReport {
    let ln_tol = tolerance.ln();
    let t_half = match (traj.times.first(), traj.times.last()) {
        (Some(a), Some(b)) => 0.5 * (a + b),
        _ => 0.0,
    };
    let mut report = ConvergenceReport {
        tolerance,
        time_to_tolerance: None,
        monotonicity_violations: 0,
        region_exits: traj.events.iter().filter(|e| e.kind == EventKind::RegionExit).count(),
        final_abs_level_error: None,
        late_max_abs_level_error: None,
        late_max_scaled_error: None,
    };
    let mut prev: Option<Observation> = None;
    for (i, obs) in traj.observations.iter().enumerate() {
        let Some(o) = obs else {
            prev = None;
            continue;
        };
        if report.time_to_tolerance.is_none() && o.log_abs_level_error < ln_tol {
            report.time_to_tolerance = Some(traj.times[i]);
        }
        if let Some(p) = prev {
            if p.controller == o.controller && p.active && o.active {
                let level = controllers[o.controller].level.log_magnitude;
                let scale = p.log_hamiltonian_scale.max(o.log_hamiltonian_scale).max(level);
                if o.log_abs_level_error > log_add_exp(p.log_abs_level_error, slack.ln() + scale) {
                    report.monotonicity_violations += 1;
                }
            }
        }
        let err = o.abs_level_error();
        report.final_abs_level_error = Some(err);
        if traj.times[i] >= t_half {
            let c = &controllers[o.controller];
            let scaled = level_residual(traj.states[i], &c.normal_form, c.center(), &c.level).abs();
            report.late_max_abs_level_error = Some(report.late_max_abs_level_error.map_or(err, |m| m.max(err)));
            report.late_max_scaled_error = Some(report.late_max_scaled_error.map_or(scaled, |m| m.max(scaled)));
        }
        prev = Some(*o);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn fig4() -> NormalFormParams {
        NormalFormParams::new(2.0, 3.0, 2, 0.01)
    }

    const O: State = State::new(0.0, 0.0);

    #[test]
    fn target_level_values() {
        let h = target_h(&fig4(), 7.0).unwrap();
        assert_relative_eq!(h.value(), -2.46492e-305, max_relative = 1e-4);
        assert!(!h.underflows());
        let neg = NormalFormParams::new(-2.0, -3.0, 2, 0.01);
        assert!(target_h(&neg, 7.0).unwrap().value() > 0.0);
        let tiny = target_h(&fig4(), 7.5).unwrap();
        assert!(tiny.underflows());
        assert_eq!(tiny.value(), 0.0);
        assert!(tiny.value().is_sign_negative());
        assert!(target_h(&fig4(), 0.0).is_err());
    }

    #[test]
    fn classic_and_general_agree() {
        let classic = NormalFormParams::new(1.0, -1.0, 1, 0.01);
        assert_eq!(hamiltonian_classic(O, 0.01).unwrap(), 0.25);
        for &(x, y) in &[(0.1, 0.02), (-0.3, 0.05), (0.0, -0.01)] {
            let s = State::new(x, y);
            assert_relative_eq!(
                hamiltonian_general(s, &classic, O).unwrap(),
                hamiltonian_classic(s, 0.01).unwrap(),
                max_relative = 1e-14
            );
        }
        // The maximal canard y = x^2 - eps/2 lies on H = 0.
        for x in [0.0, 0.05, -0.07] {
            let s = State::new(x, x * x - 0.005);
            assert_abs_diff_eq!(hamiltonian_classic(s, 0.01).unwrap(), 0.0, epsilon = 1e-12);
        }
        assert!(matches!(hamiltonian_classic(State::new(0.0, -4.0), 0.01), Err(ControlError::Overflow(_))));
    }

    #[test]
    fn value_at_origin() {
        let nf = fig4();
        let origin = State::new(0.3, 2.0);
        assert_relative_eq!(hamiltonian_general(origin, &nf, origin).unwrap(), -nf.b_c / 4.0);
    }

    #[test]
    fn perturbed_split() {
        let nf = fig4();
        let pert = PerturbationSpec { delta_a: -0.5, delta_b: 0.5 };
        let zero = PerturbationSpec::default();
        let s = State::new(0.4, -0.1);
        assert_eq!(hamiltonian_perturbed(s, &nf, &zero).unwrap(), hamiltonian_general(s, &nf, O).unwrap());
        assert_eq!(hamiltonian_delta(s, &nf, &zero).unwrap(), 0.0);
        let h = hamiltonian_general(s, &nf, O).unwrap();
        let hp = hamiltonian_perturbed(s, &nf, &pert).unwrap();
        let hd = hamiltonian_delta(s, &nf, &pert).unwrap();
        assert_relative_eq!(hp - hd, h, max_relative = 1e-12);
    }

    #[test]
    fn h_delta_negative_on_perturbed_manifold() {
        let nf = fig4();
        for delta_a in [-0.5, 0.1] {
            let pert = PerturbationSpec { delta_a, delta_b: 0.5 };
            assert_eq!(robustness_check(&nf, &pert), Robustness::Satisfied);
            let ratio = ((nf.a_c + delta_a) / (nf.b_c + pert.delta_b)).abs();
            for x in [0.0, 0.1, -0.4, 0.8] {
                let s = State::new(x, -nf.sigma * ratio * x.powi(4));
                assert!(hamiltonian_delta(s, &nf, &pert).unwrap() < 0.0);
            }
        }
    }

    #[test]
    fn robustness_examples() {
        let nf = NormalFormParams::new(1.6423, 0.100927, 1, 0.01);
        let pert = PerturbationSpec { delta_a: 0.116412, delta_b: 0.00743007 };
        assert_eq!(robustness_check(&nf, &pert), Robustness::Satisfied);
        let edge = PerturbationSpec { delta_a: 0.5 * (2.0f64 / 3.0).abs(), delta_b: 0.5 };
        let nf4 = fig4();
        assert_eq!(robustness_check(&nf4, &edge), Robustness::Violated);
        let neg = PerturbationSpec { delta_a: 0.0, delta_b: -0.1 };
        assert_eq!(robustness_check(&nf4, &neg), Robustness::NotApplicable);
        let fig6 = PerturbationSpec { delta_a: -0.5, delta_b: 0.5 };
        assert_eq!(robustness_check(&nf4, &fig6), Robustness::Satisfied);
    }

    #[test]
    fn factored_control_matches_direct_formula() {
        let nf = fig4();
        let h = target_h(&nf, 0.05).unwrap();
        let gain = 10.0;
        let region = ValidityRegion::unbounded();
        for &(x, y) in &[(0.3, -0.02), (-0.5, 0.01), (0.1, 0.0)] {
            let s = State::new(x, y);
            let hv = hamiltonian_general(s, &nf, O).unwrap();
            let e = 2.0 * y / (nf.sigma * nf.epsilon);
            let direct = -(nf.epsilon * gain * x) / (nf.sigma * 2.0 * nf.a_c) * (hv - h.value()) * (-e).exp();
            let u = fast_control_u(s, &nf, O, gain, &h, &region).unwrap();
            assert_relative_eq!(u, direct, max_relative = 1e-10);
        }
    }

    #[test]
    fn compatibility_and_level_set() {
        let nf = fig4();
        let h = target_h(&nf, 7.0).unwrap();
        let region = ValidityRegion::default();
        for y in [-3.0, -0.5, 0.0, 1.0, 3.4] {
            assert_eq!(fast_control_u(State::new(0.0, y), &nf, O, 10.0, &h, &region).unwrap(), 0.0);
        }
        // With h = 0 the control vanishes on H = 0: a X^4 = -b y + s b eps/2.
        for x in [0.1f64, 0.3, -0.45] {
            let y = (nf.sigma * nf.b_c * nf.epsilon / 2.0 - nf.a_c * x.powi(4)) / nf.b_c;
            let u = fast_control_u(State::new(x, y), &nf, O, 10.0, &TargetLevel::ZERO, &region).unwrap();
            assert_abs_diff_eq!(u, 0.0, epsilon = 1e-15);
        }
        assert!(matches!(
            fast_control_u(State::new(0.6, 0.0), &nf, O, 10.0, &h, &region),
            Err(ControlError::OutsideValidity(Outside::Radius))
        ));
        assert!(matches!(
            fast_control_u(State::new(0.1, -3.6), &nf, O, 10.0, &h, &region),
            Err(ControlError::OutsideValidity(Outside::Exponent))
        ));
    }

    #[test]
    fn shifted_and_slow_variants() {
        let nf = NormalFormParams::new(1.64218, 0.100924, 1, 0.01);
        let origin = State::new(0.6152, 28.665);
        let h = target_h(&nf, 3.0).unwrap();
        let region = ValidityRegion::default();
        let s = State::new(0.63, 28.6);
        let plain = fast_control_u(s, &nf, origin, 1500.0, &h, &region).unwrap();
        let same = fast_control_shifted(s, &nf, origin, 1500.0, &h, 1.0 / origin.x, &region).unwrap();
        assert_relative_eq!(plain, same, max_relative = 1e-12);
        let r = 1.65;
        let on_eq = State::new(1.0 / r, 28.6);
        let u = fast_control_shifted(on_eq, &nf, origin, 1500.0, &h, r, &region).unwrap();
        assert_relative_eq!(u, -nf.a_c * (1.0 / r - origin.x).powi(2), max_relative = 1e-12);
        let (_, v) = joint_fast_slow(s, &nf, origin, 1000.0, &h, r, &region).unwrap();
        assert_abs_diff_eq!(v, -(1.0 - 1.65 * 0.6152), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.01508, epsilon = 1e-5);
        let (_, v0) = joint_fast_slow(s, &nf, origin, 1000.0, &h, 1.0 / origin.x, &region).unwrap();
        assert_abs_diff_eq!(v0, 0.0, epsilon = 1e-15);
        let slow = NormalFormParams { epsilon: 1.0, ..nf };
        let h1 = target_h(&slow, 100.0).unwrap();
        let (_, floor) = joint_fast_slow(State::new(0.6, 0.0), &slow, origin, 1.0, &h1, r, &region).unwrap();
        assert_eq!(floor, 0.0);
    }

    #[test]
    fn lyapunov_basics() {
        let nf = fig4();
        let h = TargetLevel { sign: -1.0, log_magnitude: (0.1f64).ln() };
        let s = State::new(0.2, -0.01);
        assert!(lyapunov_value(s, &nf, O, &h).unwrap() >= 0.0);
        let on = State::new((0.1f64).sqrt(), 0.0);
        let lvl = TargetLevel {
            sign: 1.0,
            log_magnitude: hamiltonian_general(on, &nf, O).unwrap().ln(),
        };
        assert_abs_diff_eq!(lyapunov_value(on, &nf, O, &lvl).unwrap(), 0.0, epsilon = 1e-20);
    }

    #[test]
    fn level_curve_points_have_zero_residual() {
        let nf = fig4();
        let c = Controller::new("F", ControlLaw::FastOnly, O, nf, 10.0, 7.0, None, ValidityRegion::unbounded())
            .unwrap();
        let pts = c.level_curve(200);
        assert!(pts.len() > 100);
        for (x, y) in pts {
            let s = level_residual(State::new(x, y), &nf, O, &c.level);
            assert_abs_diff_eq!(s, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn controller_validation() {
        let nf = fig4();
        let v = ValidityRegion::default();
        assert!(Controller::new("a", ControlLaw::FastSlow, State::new(0.6, 28.0), nf, 1.0, 1.0, None, v).is_err());
        assert!(Controller::new("a", ControlLaw::FastOnly, O, nf, 0.0, 1.0, None, v).is_err());
        assert!(Controller::new("a", ControlLaw::FastSlow, O, nf, 1.0, 1.0, Some(1.0), v).is_err());
        let bad = Schedule {
            initial: None,
            switches: vec![Switch { t: 2.0, controller: None }, Switch { t: 1.0, controller: None }],
        };
        assert!(bad.validate().is_err());
    }
}
