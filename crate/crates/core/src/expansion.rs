//! Local normal-form data at a fold from finite differences of the fast field.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::{CriticalField, FoldPoint};
use crate::model::{ModelError, NormalFormParams};

/// Relative threshold below which a derivative counts as zero.
pub const DERIVATIVE_THRESHOLD: f64 = 1e-5;
/// Radius of the neighborhood defining the field scale.
pub const SCALE_RADIUS: f64 = 0.05;

/// Central-difference weights of second-order accuracy for orders 1..=6,
/// on offsets `-m..=m`.
fn stencil(order: usize) -> &'static [f64] {
    match order {
        1 => &[-0.5, 0.0, 0.5],
        2 => &[1.0, -2.0, 1.0],
        3 => &[-0.5, 1.0, 0.0, -1.0, 0.5],
        4 => &[1.0, -4.0, 6.0, -4.0, 1.0],
        5 => &[-0.5, 2.0, -2.5, 0.0, 2.5, -2.0, 0.5],
        6 => &[1.0, -6.0, 15.0, -20.0, 15.0, -6.0, 1.0],
        _ => unreachable!("order checked by caller"),
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExpansionError {
    #[error("derivative order {0} outside 1..=6")]
    Order(usize),
    #[error("no nonzero derivative up to order {order} (k_max = {k_max})")]
    DegenerateBeyond { k_max: u32, order: usize },
    #[error("first nonzero x-derivative has odd order {0}; not a fold")]
    OddContact(usize),
    #[error("dF/dy = {0:e} vanishes at the fold")]
    NoSlowCoupling(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Derivative estimate with a precision flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdEstimate {
    pub value: f64,
    /// Successive Richardson levels disagreed by more than 1e-4 relative.
    pub precision_warning: bool,
}

fn difference<F: FnMut(f64) -> Result<f64, ModelError>>(
    f: &mut F,
    at: f64,
    order: usize,
    h: f64,
) -> Result<f64, ModelError> {
    let w = stencil(order);
    let m = (w.len() / 2) as i32;
    let mut acc = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        if wi != 0.0 {
            acc += wi * f(at + f64::from(i as i32 - m) * h)?;
        }
    }
    Ok(acc / h.powi(order as i32))
}

/// Base step for an `order`-th difference. Orders 1 and 2 use
/// `max(1e-4, 1e-3 |at|)`; higher orders widen it towards the
/// roundoff/truncation balance of a sixth-order extrapolated stencil.
fn base_step(at: f64, order: usize) -> f64 {
    let h = (1e-3 * at.abs()).max(1e-4);
    if order <= 2 {
        h
    } else {
        h.max(f64::EPSILON.powf(1.0 / (order as f64 + 6.0)) * at.abs().max(1.0))
    }
}

/// `order`-th derivative of `f` at `at` by central differences with two
/// Richardson refinements of the base step.
pub fn fd_derivative<F>(mut f: F, at: f64, order: usize) -> Result<FdEstimate, ExpansionError>
where
    F: FnMut(f64) -> Result<f64, ModelError>,
{
    if !(1..=6).contains(&order) {
        return Err(ExpansionError::Order(order));
    }
    let h0 = base_step(at, order);
    let d0 = difference(&mut f, at, order, h0)?;
    let d1 = difference(&mut f, at, order, h0 / 2.0)?;
    let d2 = difference(&mut f, at, order, h0 / 4.0)?;
    let r10 = (4.0 * d1 - d0) / 3.0;
    let r11 = (4.0 * d2 - d1) / 3.0;
    let value = (16.0 * r11 - r10) / 15.0;
    let gap = (r11 - r10).abs();
    let precision_warning = gap > 1e-4 * r11.abs().max(r10.abs()) && gap > 1e-9;
    Ok(FdEstimate { value, precision_warning })
}

/// Normal form at a fold with the derivative evidence behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    pub normal_form: NormalFormParams,
    /// `d^n F / dx^n` for `n = 1..=2k`.
    pub derivatives: Vec<f64>,
    /// `max |F|` over the scale neighborhood.
    pub scale: f64,
    /// Set when the `2k`-th derivative estimate is unreliable.
    pub precision_warning: bool,
}

fn field_scale<F: CriticalField + ?Sized>(field: &F, fold: &FoldPoint) -> Result<f64, ModelError> {
    let mut scale = 0.0f64;
    for i in 0..=100 {
        let x = fold.x_star - SCALE_RADIUS + 2.0 * SCALE_RADIUS * (i as f64 / 100.0);
        match field.field(x, fold.y_star) {
            Ok(v) => scale = scale.max(v.abs()),
            Err(ModelError::Pole { .. }) => {}
        }
    }
    Ok(if scale > 0.0 { scale } else { 1.0 })
}

fn x_derivatives<F: CriticalField + ?Sized>(
    field: &F,
    fold: &FoldPoint,
    up_to: usize,
) -> Result<(Vec<f64>, Vec<bool>), ExpansionError> {
    let mut warn = Vec::with_capacity(up_to);
    let mut out = Vec::with_capacity(up_to);
    for n in 1..=up_to {
        let d = fd_derivative(|x| field.field(x, fold.y_star), fold.x_star, n)?;
        warn.push(d.precision_warning);
        out.push(d.value);
    }
    Ok((out, warn))
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

fn assemble<F: CriticalField + ?Sized>(
    field: &F,
    fold: &FoldPoint,
    k: u32,
    derivatives: Vec<f64>,
    scale: f64,
    warn: &[bool],
) -> Result<Expansion, ExpansionError> {
    let order = 2 * k as usize;
    let warn = warn[order - 1];
    let a_c = derivatives[order - 1] / factorial(order);
    let b_c = field.field_dy(fold.x_star, fold.y_star)?;
    if b_c.abs() <= 1e-12 || !b_c.is_finite() {
        return Err(ExpansionError::NoSlowCoupling(b_c));
    }
    let normal_form = NormalFormParams::new(a_c, b_c, k, field.epsilon());
    Ok(Expansion { normal_form, derivatives: derivatives[..order].to_vec(), scale, precision_warning: warn })
}

/// Contact order and coefficients at a fold.
///
/// `k` is the smallest integer whose `2k`-th derivative exceeds
/// `DERIVATIVE_THRESHOLD * scale` while all lower ones stay below it.
pub fn expand_at_fold<F: CriticalField + ?Sized>(
    field: &F,
    fold: &FoldPoint,
    k_max: u32,
) -> Result<Expansion, ExpansionError> {
    let scale = field_scale(field, fold)?;
    let max_order = (2 * k_max as usize).min(6);
    let (derivatives, warn) = x_derivatives(field, fold, max_order)?;
    let limit = DERIVATIVE_THRESHOLD * scale;
    let Some(first) = derivatives.iter().position(|d| d.abs() > limit).map(|i| i + 1) else {
        return Err(ExpansionError::DegenerateBeyond { k_max, order: max_order });
    };
    if first % 2 == 1 {
        return Err(ExpansionError::OddContact(first));
    }
    assemble(field, fold, (first / 2) as u32, derivatives, scale, &warn)
}

/// Expansion with a prescribed contact order, whatever the lower derivatives.
pub fn expand_with_order<F: CriticalField + ?Sized>(
    field: &F,
    fold: &FoldPoint,
    k: u32,
) -> Result<Expansion, ExpansionError> {
    if k == 0 || 2 * k as usize > 6 {
        return Err(ExpansionError::Order(2 * k as usize));
    }
    let scale = field_scale(field, fold)?;
    let (derivatives, warn) = x_derivatives(field, fold, 2 * k as usize)?;
    assemble(field, fold, k, derivatives, scale, &warn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::FieldFn;
    use approx::assert_abs_diff_eq;

    fn origin() -> FoldPoint {
        FoldPoint { x_star: 0.0, y_star: 0.0, residual: 0.0 }
    }

    #[test]
    fn polynomial_and_sine() {
        let d = fd_derivative(|x| Ok(x * x * x), 1.0, 2).unwrap();
        assert_abs_diff_eq!(d.value, 6.0, epsilon = 1e-6);
        let d = fd_derivative(|x: f64| Ok(x.sin()), 0.0, 1).unwrap();
        assert_abs_diff_eq!(d.value, 1.0, epsilon = 1e-8);
        assert!(!d.precision_warning);
        for n in 1..=6 {
            let d = fd_derivative(|x: f64| Ok(x.exp()), 0.3, n).unwrap();
            let tol = [1e-10, 1e-7, 1e-3, 1e-1, 10.0, 1e3][n - 1];
            assert_abs_diff_eq!(d.value, 0.3f64.exp(), epsilon = tol);
        }
        assert!(matches!(fd_derivative(Ok, 0.0, 7), Err(ExpansionError::Order(7))));
    }

    #[test]
    fn quartic_fold() {
        let field = FieldFn { f: |x: f64, y| 0.25 * x.powi(4) - y, domain: (-1.0, 1.0), epsilon: 0.01 };
        let e = expand_at_fold(&field, &origin(), 3).unwrap();
        assert_eq!(e.normal_form.k, 2);
        assert_abs_diff_eq!(e.normal_form.a_c, 0.25, epsilon = 1e-8);
        assert_abs_diff_eq!(e.normal_form.b_c, -1.0, epsilon = 1e-8);
        assert_eq!(e.normal_form.sigma, -1.0);
    }

    #[test]
    fn both_jets_of_mixed_polynomial() {
        let f = |x: f64, y| 0.1 * x.powi(5) + 0.25 * x.powi(4) + 0.1 * x * x - y;
        let field = FieldFn { f, domain: (-1.0, 1.0), epsilon: 0.01 };
        let e = expand_at_fold(&field, &origin(), 3).unwrap();
        assert_eq!(e.normal_form.k, 1);
        assert_abs_diff_eq!(e.normal_form.a_c, 0.1, epsilon = 1e-8);
        let e4 = expand_with_order(&field, &origin(), 2).unwrap();
        assert_abs_diff_eq!(e4.normal_form.a_c, 0.25, epsilon = 1e-6);
    }

    #[test]
    fn degenerate_and_odd_cases() {
        let flat = FieldFn { f: |x: f64, y| x.powi(8) - y, domain: (-1.0, 1.0), epsilon: 0.01 };
        assert!(matches!(expand_at_fold(&flat, &origin(), 3), Err(ExpansionError::DegenerateBeyond { .. })));
        let odd = FieldFn { f: |x: f64, y| x.powi(3) - y, domain: (-1.0, 1.0), epsilon: 0.01 };
        assert!(matches!(expand_at_fold(&odd, &origin(), 3), Err(ExpansionError::OddContact(3))));
        let uncoupled = FieldFn { f: |x: f64, _y| x * x, domain: (-1.0, 1.0), epsilon: 0.01 };
        assert!(matches!(expand_at_fold(&uncoupled, &origin(), 3), Err(ExpansionError::NoSlowCoupling(_))));
    }

    #[test]
    fn factorial_convention() {
        assert_eq!(factorial(4), 24.0);
        assert_eq!(factorial(2), 2.0);
    }
}
