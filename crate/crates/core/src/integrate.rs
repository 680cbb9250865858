//! Explicit Runge-Kutta integration of [`FastSlowSystem`]s.
//!
//! Fixed-step RK4 applies scheduled switches at the first step boundary at or
//! after the requested time. Adaptive Dormand-Prince 5(4) ends a step exactly
//! on each switch time instead.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Event, EventKind, FastSlowSystem, ModelError, Observation, ParamError, State};

/// Stepping scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Method {
    #[serde(rename = "rk4-fixed")]
    Rk4 { dt: f64 },
    #[serde(rename = "rk45-adaptive")]
    Rk45 { rtol: f64, atol: f64, dt_min: f64, dt_max: f64 },
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationConfig {
    pub method: Method,
    #[serde(default)]
    pub t_start: f64,
    pub t_end: f64,
    /// Record every n-th step; the final state is always recorded.
    #[serde(default = "default_stride")]
    pub sample_stride: usize,
}

impl IntegrationConfig {
    pub fn rk4(dt: f64, t_end: f64, sample_stride: usize) -> Self {
        Self { method: Method::Rk4 { dt }, t_start: 0.0, t_end, sample_stride }
    }

    pub fn rk45(rtol: f64, atol: f64, t_end: f64) -> Self {
        let span = t_end.abs().max(1.0);
        Self {
            method: Method::Rk45 { rtol, atol, dt_min: 1e-12 * span, dt_max: 0.1 * span },
            t_start: 0.0,
            t_end,
            sample_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        match self.method {
            Method::Rk4 { dt } => {
                if !finite_pos(dt) {
                    return Err(ParamError::new("method.dt", "must be finite and > 0"));
                }
            }
            Method::Rk45 { rtol, atol, dt_min, dt_max } => {
                for (name, v) in [("rtol", rtol), ("atol", atol), ("dt_min", dt_min), ("dt_max", dt_max)] {
                    if !finite_pos(v) {
                        return Err(ParamError::new(format!("method.{name}"), "must be finite and > 0"));
                    }
                }
                if dt_min > dt_max {
                    return Err(ParamError::new("method.dt_min", "must not exceed dt_max"));
                }
            }
        }
        if !self.t_start.is_finite() {
            return Err(ParamError::new("t_start", "must be finite"));
        }
        if !self.t_end.is_finite() || self.t_end < self.t_start {
            return Err(ParamError::new("t_end", "must be finite and >= t_start"));
        }
        if self.sample_stride == 0 {
            return Err(ParamError::new("sample_stride", "must be >= 1"));
        }
        Ok(())
    }
}

/// Sampled solution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    /// Control values per sample; `None` where the system runs open loop.
    pub observations: Vec<Option<Observation>>,
    pub events: Vec<Event>,
    /// Accepted steps.
    pub steps: usize,
    /// Rejected adaptive steps.
    pub rejected: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<(f64, State)> {
        Some((*self.times.last()?, *self.states.last()?))
    }

    fn push<S: FastSlowSystem + ?Sized>(&mut self, sys: &S, t: f64, s: State) {
        self.times.push(t);
        self.states.push(s);
        self.observations.push(sys.observe(t, s));
    }

    fn log(&mut self, t: f64, kind: EventKind, message: String) {
        self.events.push(Event { t, kind, message });
    }

    /// Samples with `t >= t0`.
    pub fn after(&self, t0: f64) -> impl Iterator<Item = (f64, State)> + '_ {
        self.times.iter().zip(&self.states).filter(move |(t, _)| **t >= t0).map(|(t, s)| (*t, *s))
    }

    /// Time average of `x` over `[t0, t1]` by the trapezoidal rule on the
    /// samples inside the window.
    pub fn mean_x(&self, t0: f64, t1: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self.after(t0).take_while(|(t, _)| *t <= t1).map(|(t, s)| (t, s.x)).collect();
        match pts.len() {
            0 => None,
            1 => Some(pts[0].1),
            _ => {
                let area: f64 = pts.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum();
                Some(area / (pts[pts.len() - 1].0 - pts[0].0))
            }
        }
    }

    /// Times of the local maxima of `y` after `t0`.
    pub fn y_peaks(&self, t0: f64) -> Vec<f64> {
        let pts: Vec<(f64, State)> = self.after(t0).collect();
        pts.windows(3).filter(|w| w[1].1.y > w[0].1.y && w[1].1.y >= w[2].1.y).map(|w| w[1].0).collect()
    }

    /// Last complete oscillation period after `t0`, between consecutive
    /// maxima of `y`.
    pub fn last_period(&self, t0: f64) -> Option<(f64, f64)> {
        let peaks = self.y_peaks(t0);
        let n = peaks.len();
        (n >= 2).then(|| (peaks[n - 2], peaks[n - 1]))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FailureKind {
    #[error("step size {dt:e} below dt_min {dt_min:e}")]
    StepUnderflow { dt: f64, dt_min: f64 },
    #[error("non-finite state")]
    NonFinite,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Aborted integration; `partial` ends with the last good state.
#[derive(Debug, Clone, Error)]
#[error("integration failed at t = {t}: {kind}")]
pub struct IntegrationFailure {
    pub kind: FailureKind,
    pub t: f64,
    pub partial: Trajectory,
}

#[derive(Debug, Clone, Error)]
pub enum IntegrateError {
    #[error("invalid integration config: {0}")]
    Config(#[from] ParamError),
    #[error(transparent)]
    Failed(#[from] Box<IntegrationFailure>),
}

impl IntegrateError {
    pub fn partial(&self) -> Option<&Trajectory> {
        match self {
            Self::Failed(f) => Some(&f.partial),
            Self::Config(_) => None,
        }
    }
}

type Deriv = (f64, f64);

#[inline]
fn advance(s: State, h: f64, k: Deriv) -> State {
    State::new(s.x + h * k.0, s.y + h * k.1)
}

/// Adds an increment, leaving the value untouched when it is exactly zero.
#[inline]
fn bump(v: f64, inc: f64) -> f64 {
    if inc == 0.0 {
        v
    } else {
        v + inc
    }
}

fn rk4_step<S: FastSlowSystem + ?Sized>(sys: &S, t: f64, s: State, h: f64) -> Result<State, ModelError> {
    let k1 = sys.rhs(t, s)?;
    let k2 = sys.rhs(t + 0.5 * h, advance(s, 0.5 * h, k1))?;
    let k3 = sys.rhs(t + 0.5 * h, advance(s, 0.5 * h, k2))?;
    let k4 = sys.rhs(t + h, advance(s, h, k3))?;
    let w = h / 6.0;
    Ok(State::new(
        bump(s.x, w * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0)),
        bump(s.y, w * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1)),
    ))
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One Dormand-Prince step; returns the 5th-order state and the scaled error norm.
fn dp_step<S: FastSlowSystem + ?Sized>(
    sys: &S,
    t: f64,
    s: State,
    h: f64,
    rtol: f64,
    atol: f64,
) -> Result<(State, f64), ModelError> {
    let mut k = [(0.0, 0.0); 7];
    for i in 0..7 {
        let (mut dx, mut dy) = (0.0, 0.0);
        for j in 0..i {
            dx += A[i][j] * k[j].0;
            dy += A[i][j] * k[j].1;
        }
        k[i] = sys.rhs(t + C[i] * h, State::new(s.x + h * dx, s.y + h * dy))?;
    }
    let (mut x5, mut y5, mut ex, mut ey) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..7 {
        x5 += B5[i] * k[i].0;
        y5 += B5[i] * k[i].1;
        ex += (B5[i] - B4[i]) * k[i].0;
        ey += (B5[i] - B4[i]) * k[i].1;
    }
    let next = State::new(bump(s.x, h * x5), bump(s.y, h * y5));
    let sx = atol + rtol * s.x.abs().max(next.x.abs());
    let sy = atol + rtol * s.y.abs().max(next.y.abs());
    let err = (h * ex / sx).abs().max((h * ey / sy).abs());
    Ok((next, if err.is_nan() { f64::INFINITY } else { err }))
}

fn fail(kind: FailureKind, t: f64, s: State, mut partial: Trajectory) -> IntegrateError {
    if partial.times.last() != Some(&t) {
        partial.times.push(t);
        partial.states.push(s);
        partial.observations.push(None);
    }
    partial.log(t, EventKind::Failure, kind.to_string());
    IntegrateError::Failed(Box::new(IntegrationFailure { kind, t, partial }))
}

fn apply_switch<S: FastSlowSystem + ?Sized>(sys: &mut S, traj: &mut Trajectory, index: usize, t: f64, s: State) {
    if let Some(msg) = sys.on_switch(index, t, s) {
        traj.log(t, EventKind::Switch, msg);
    }
}

/// Integrates `sys` from `s0` over `[cfg.t_start, cfg.t_end]`.
///
/// A zero-length interval gives an empty trajectory.
pub fn integrate<S: FastSlowSystem + ?Sized>(
    sys: &mut S,
    s0: State,
    cfg: &IntegrationConfig,
) -> Result<Trajectory, IntegrateError> {
    cfg.validate()?;
    let mut traj = Trajectory::default();
    if cfg.t_end == cfg.t_start {
        return Ok(traj);
    }
    if !s0.is_finite() {
        return Err(fail(FailureKind::NonFinite, cfg.t_start, s0, traj));
    }
    sys.reset();
    let switches = sys.switch_times();
    let t0 = cfg.t_start;
    let mut pending = Vec::new();
    for (i, &ts) in switches.iter().enumerate() {
        if ts <= t0 {
            apply_switch(sys, &mut traj, i, t0, s0);
        } else if ts < cfg.t_end {
            pending.push((i, ts));
        }
    }
    traj.push(sys, t0, s0);
    match cfg.method {
        Method::Rk4 { dt } => run_fixed(sys, s0, cfg, dt, &pending, traj),
        Method::Rk45 { rtol, atol, dt_min, dt_max } => {
            run_adaptive(sys, s0, cfg, (rtol, atol, dt_min, dt_max), &pending, traj)
        }
    }
}

fn after_step<S: FastSlowSystem + ?Sized>(sys: &mut S, traj: &mut Trajectory, t: f64, s: State) {
    if let Some((kind, msg)) = sys.after_step(t, s) {
        traj.log(t, kind, msg);
    }
}

fn run_fixed<S: FastSlowSystem + ?Sized>(
    sys: &mut S,
    s0: State,
    cfg: &IntegrationConfig,
    dt: f64,
    pending: &[(usize, f64)],
    mut traj: Trajectory,
) -> Result<Trajectory, IntegrateError> {
    let t0 = cfg.t_start;
    let steps_for = |span: f64| ((span / dt) - 1e-9).ceil().max(1.0) as usize;
    let n = steps_for(cfg.t_end - t0);
    // Switch i fires after step index switch_at[i].
    let switch_at: Vec<usize> = pending.iter().map(|&(_, ts)| steps_for(ts - t0)).collect();
    let mut next_switch = 0;
    let mut s = s0;
    let mut t = t0;
    for i in 0..n {
        let last = i + 1 == n;
        let t_next = if last { cfg.t_end } else { t0 + (i + 1) as f64 * dt };
        let next = match rk4_step(sys, t, s, t_next - t) {
            Ok(v) => v,
            Err(e) => return Err(fail(e.into(), t, s, traj)),
        };
        if !next.is_finite() {
            return Err(fail(FailureKind::NonFinite, t, s, traj));
        }
        s = next;
        t = t_next;
        traj.steps += 1;
        after_step(sys, &mut traj, t, s);
        while next_switch < switch_at.len() && switch_at[next_switch] <= i + 1 {
            apply_switch(sys, &mut traj, pending[next_switch].0, t, s);
            next_switch += 1;
        }
        if last || (i + 1) % cfg.sample_stride == 0 {
            traj.push(sys, t, s);
        }
    }
    Ok(traj)
}

fn run_adaptive<S: FastSlowSystem + ?Sized>(
    sys: &mut S,
    s0: State,
    cfg: &IntegrationConfig,
    (rtol, atol, dt_min, dt_max): (f64, f64, f64, f64),
    pending: &[(usize, f64)],
    mut traj: Trajectory,
) -> Result<Trajectory, IntegrateError> {
    let mut breaks: Vec<f64> = pending.iter().map(|p| p.1).collect();
    breaks.push(cfg.t_end);
    let mut next_break = 0;
    let mut s = s0;
    let mut t = cfg.t_start;
    let mut h = dt_max.min(cfg.t_end - t);
    while next_break < breaks.len() {
        let target = breaks[next_break];
        let clipped = t + h >= target;
        let h_try = if clipped { target - t } else { h };
        let (next, err) = match dp_step(sys, t, s, h_try, rtol, atol) {
            Ok(v) => v,
            Err(e) => return Err(fail(e.into(), t, s, traj)),
        };
        if err <= 1.0 && next.is_finite() {
            let t_next = if clipped { target } else { t + h_try };
            s = next;
            t = t_next;
            traj.steps += 1;
            after_step(sys, &mut traj, t, s);
            let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = if clipped { h.max(h_try * grow) } else { h_try * grow }.min(dt_max);
            let at_end = clipped && next_break + 1 == breaks.len();
            if clipped {
                if !at_end {
                    apply_switch(sys, &mut traj, pending[next_break].0, t, s);
                }
                next_break += 1;
            }
            if at_end || traj.steps % cfg.sample_stride == 0 {
                traj.push(sys, t, s);
            }
        } else {
            traj.rejected += 1;
            let shrink = if err.is_finite() { (0.9 * err.powf(-0.2)).clamp(0.1, 0.9) } else { 0.1 };
            h = h_try * shrink;
            if h < dt_min {
                return Err(fail(FailureKind::StepUnderflow { dt: h, dt_min }, t, s, traj));
            }
        }
    }
    Ok(traj)
}

struct Layer<'a, S: ?Sized>(&'a S);

impl<S: FastSlowSystem + ?Sized> FastSlowSystem for Layer<'_, S> {
    fn rhs(&self, t: f64, s: State) -> Result<(f64, f64), ModelError> {
        Ok((self.0.fast(t, s)?, 0.0))
    }
}

/// Integrates the layer problem `x' = F(x, y)` with `y` frozen.
pub fn integrate_layer<S: FastSlowSystem + ?Sized>(
    sys: &S,
    s0: State,
    cfg: &IntegrationConfig,
) -> Result<Trajectory, IntegrateError> {
    integrate(&mut Layer(sys), s0, cfg)
}
