//! Run configuration. Every section a command reads is resolved (defaults
//! filled in, folds located) before the run, and the resolved form is what
//! lands in `run.json`; feeding that file back reproduces the run.

use std::path::Path;

use canard_core::control::{Controller, Schedule, ValidityRegion};
use canard_core::manifold::{CriticalField, FoldSearch};
use canard_core::sweep::{planes, SweepSpec};
use canard_core::{
    ControlLaw, DecisionParamsFull, DecisionParamsReduced, IntegrationConfig, NormalFormParams, PerturbationSpec,
    State,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<State>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integration: Option<IntegrationConfig>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub manifold: ManifoldConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

/// Normal-form coefficients; `sigma` is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalFormConfig {
    pub a_c: f64,
    pub b_c: f64,
    pub k: u32,
    pub epsilon: f64,
    #[serde(default)]
    pub slow_offset: f64,
}

impl NormalFormConfig {
    pub fn params(&self) -> NormalFormParams {
        NormalFormParams { slow_offset: self.slow_offset, ..NormalFormParams::new(self.a_c, self.b_c, self.k, self.epsilon) }
    }

    pub fn from_params(nf: &NormalFormParams) -> Self {
        Self { a_c: nf.a_c, b_c: nf.b_c, k: nf.k, epsilon: nf.epsilon, slow_offset: nf.slow_offset }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    Full { params: DecisionParamsFull },
    Reduced { params: DecisionParamsReduced },
    NormalForm { params: NormalFormConfig },
    PerturbedNormalForm { params: NormalFormConfig, perturbation: PerturbationSpec },
}

impl SystemConfig {
    pub fn validate(&self, path: &str) -> Result<(), CliError> {
        let r = match self {
            Self::Full { params } => params.validate(),
            Self::Reduced { params } => params.validate(),
            Self::NormalForm { params } => params.params().validate(),
            Self::PerturbedNormalForm { params, perturbation } => params.params().validate().and_then(|_| {
                params.params().perturbed(perturbation).validate().map_err(|e| e.within("perturbed"))
            }),
        };
        r.map_err(|e| CliError::config(format!("{path}.params.{}", e.field), e.reason))
    }

    pub fn is_decision_model(&self) -> bool {
        matches!(self, Self::Full { .. } | Self::Reduced { .. })
    }

    /// Harvesting rate of decision models.
    pub fn r(&self) -> Option<f64> {
        match self {
            Self::Full { params } => Some(params.r),
            Self::Reduced { params } => Some(params.r),
            _ => None,
        }
    }

    /// The critical field; perturbed normal forms use their perturbed coefficients.
    pub fn field(&self) -> Box<dyn CriticalField> {
        match *self {
            Self::Full { params } => Box::new(params),
            Self::Reduced { params } => Box::new(params),
            Self::NormalForm { params } => Box::new(params.params()),
            Self::PerturbedNormalForm { params, perturbation } => Box::new(params.params().perturbed(&perturbation)),
        }
    }
}

fn default_k_max() -> u32 {
    3
}

/// Fold search and expansion settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub search: FoldSearch,
    #[serde(default = "default_k_max")]
    pub k_max: u32,
    /// Forces the contact order instead of detecting it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<u32>,
    /// Expand at this point instead of at the detected folds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<State>,
    /// Second system whose folds are compared fold by fold (`expand`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<SystemConfig>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { search: FoldSearch::default(), k_max: default_k_max(), order: None, at: None, compare: None }
    }
}

fn default_levels() -> usize {
    400
}

fn default_cells() -> usize {
    2000
}

/// Sampling of `manifold.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldConfig {
    /// Defaults to the trajectory's `y` range plus 10% on each side.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_range: Option<(f64, f64)>,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_cells")]
    pub grid_cells: usize,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        Self { y_range: None, levels: default_levels(), grid_cells: default_cells() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    #[default]
    On,
    Off,
}

fn default_tolerance() -> f64 {
    1e-8
}

fn default_slack() -> f64 {
    1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    #[serde(default)]
    pub mode: ControlMode,
    /// System the controllers are derived from; defaults to `system`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<SystemConfig>,
    pub controllers: Vec<ControllerConfig>,
    /// Defaults to the first controller, always on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    /// `|H - h|` threshold of the convergence report.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Monotonicity slack, relative to the size of the terms of `H`.
    #[serde(default = "default_slack")]
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub name: String,
    pub law: ControlLaw,
    pub gain: f64,
    pub c_c: f64,
    /// Fold used when `origin` and `normal_form` are not given, by `x` order.
    #[serde(default)]
    pub fold_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<State>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_form: Option<NormalFormConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity: Option<ValidityRegion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Named reference plane, e.g. `alpha_gamma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane: Option<String>,
    /// Resolution of a named plane; 60 by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SweepSpec>,
    /// Worker threads, 0 for all cores; `--workers` and `CANARD_WORKERS` take precedence.
    #[serde(default)]
    pub workers: usize,
}

pub fn load(path: &Path) -> Result<Config, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<Config, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(if path == "." { "config".to_owned() } else { path }, e.into_inner().to_string())
    })?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(CliError::config("schema_version", format!("expected {SCHEMA_VERSION}")));
    }
    Ok(cfg)
}

impl Config {
    pub fn system(&self) -> Result<&SystemConfig, CliError> {
        let s = self.system.as_ref().ok_or_else(|| CliError::config("system", "missing"))?;
        s.validate("system")?;
        Ok(s)
    }

    pub fn initial_state(&self) -> Result<State, CliError> {
        let s = self.initial_state.ok_or_else(|| CliError::config("initial_state", "missing"))?;
        if !s.is_finite() {
            return Err(CliError::config("initial_state", "must be finite"));
        }
        Ok(s)
    }

    pub fn integration(&self) -> Result<IntegrationConfig, CliError> {
        let c = self.integration.ok_or_else(|| CliError::config("integration", "missing"))?;
        c.validate().map_err(|e| CliError::config(format!("integration.{}", e.field), e.reason))?;
        Ok(c)
    }

    pub fn validate_analysis(&self) -> Result<(), CliError> {
        let a = &self.analysis;
        let s = &a.search;
        if !(s.y_lo.is_finite() && s.y_hi.is_finite() && s.y_lo < s.y_hi) {
            return Err(CliError::config("analysis.search.y_lo", "need finite y_lo < y_hi"));
        }
        if s.levels < 2 || s.grid_cells < 4 {
            return Err(CliError::config("analysis.search", "need levels >= 2 and grid_cells >= 4"));
        }
        if !(1..=3).contains(&a.k_max) {
            return Err(CliError::config("analysis.k_max", "must lie in 1..=3"));
        }
        if a.order.is_some_and(|k| !(1..=3).contains(&k)) {
            return Err(CliError::config("analysis.order", "must lie in 1..=3"));
        }
        if let Some(c) = &a.compare {
            c.validate("analysis.compare")?;
        }
        Ok(())
    }

    pub fn validate_manifold(&self) -> Result<(), CliError> {
        let m = &self.manifold;
        if m.y_range.is_some_and(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
            return Err(CliError::config("manifold.y_range", "need finite lo <= hi"));
        }
        if m.grid_cells < 4 {
            return Err(CliError::config("manifold.grid_cells", "must be >= 4"));
        }
        Ok(())
    }
}

impl SweepConfig {
    /// The concrete spec, from `spec` or from a named plane.
    pub fn resolve(&self) -> Result<SweepSpec, CliError> {
        let spec = match (&self.spec, &self.plane) {
            (Some(_), Some(_)) => return Err(CliError::config("sweep.plane", "give either plane or spec")),
            (Some(s), None) => {
                if self.n.is_some() {
                    return Err(CliError::config("sweep.n", "only used with plane"));
                }
                s.clone()
            }
            (None, Some(name)) => {
                let n = self.n.unwrap_or(60);
                named_plane(name, n).ok_or_else(|| CliError::config("sweep.plane", format!("unknown plane {name:?}")))?
            }
            (None, None) => return Err(CliError::config("sweep", "need plane or spec")),
        };
        spec.validate().map_err(|e| CliError::config(format!("sweep.spec.{}", e.field), e.reason))?;
        Ok(spec)
    }
}

pub fn named_plane(name: &str, n: usize) -> Option<SweepSpec> {
    if name == "alpha_gamma" {
        return Some(planes::alpha_gamma(n));
    }
    planes::appendix(n).into_iter().find(|(p, _)| *p == name).map(|(_, s)| s)
}

/// Controller plus the resolved config entry that produced it.
pub struct ResolvedController {
    pub controller: Controller,
    pub config: ControllerConfig,
}

/// Resolves controller origins and coefficients, from explicit values or
/// from the design system's folds.
pub fn resolve_controllers(
    control: &ControlConfig,
    system: &SystemConfig,
    analysis: &AnalysisConfig,
) -> Result<Vec<ResolvedController>, CliError> {
    let design = control.design.as_ref().unwrap_or(system);
    if control.design.is_some() {
        design.validate("control.design")?;
    }
    if control.controllers.is_empty() {
        return Err(CliError::config("control.controllers", "at least one controller required"));
    }
    for (name, v) in [("tolerance", control.tolerance), ("slack", control.slack)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(CliError::config(format!("control.{name}"), "must be finite and > 0"));
        }
    }
    let mut folds = None;
    let mut out = Vec::new();
    for (i, c) in control.controllers.iter().enumerate() {
        let path = format!("control.controllers[{i}]");
        if control.controllers[..i].iter().any(|o| o.name == c.name) {
            return Err(CliError::config(format!("{path}.name"), "duplicate controller name"));
        }
        let (origin, nf) = match (c.origin, c.normal_form, design) {
            (Some(o), Some(nf), _) => (o, nf.params()),
            (None, None, SystemConfig::NormalForm { params } | SystemConfig::PerturbedNormalForm { params, .. }) => {
                (State::new(0.0, 0.0), params.params())
            }
            (None, None, _) => {
                if folds.is_none() {
                    folds = Some(crate::commands::analyse(design, analysis)?);
                }
                let list = folds.as_ref().expect("set above");
                let entry = list.get(c.fold_index).ok_or_else(|| {
                    CliError::config(format!("{path}.fold_index"), format!("only {} folds found", list.len()))
                })?;
                let e = entry.expansion.as_ref().map_err(|e| {
                    CliError::Numerical(format!("{path}: expansion at fold {} failed: {e}", c.fold_index))
                })?;
                (State::new(entry.fold.x_star, entry.fold.y_star), e.normal_form)
            }
            _ => return Err(CliError::config(format!("{path}.origin"), "give both origin and normal_form, or neither")),
        };
        let r = c.r.or_else(|| design.r());
        let validity = c.validity.unwrap_or_else(|| {
            if design.is_decision_model() {
                ValidityRegion::default()
            } else {
                ValidityRegion::unbounded()
            }
        });
        let controller = Controller::new(&c.name, c.law, origin, nf, c.gain, c.c_c, r, validity).map_err(|e| match e {
            canard_core::control::ControlError::Param(p) => CliError::config(format!("{path}.{}", p.field), p.reason),
            other => CliError::config(path.clone(), other.to_string()),
        })?;
        let config = ControllerConfig {
            origin: Some(origin),
            normal_form: Some(NormalFormConfig::from_params(&nf)),
            r,
            validity: Some(validity),
            ..c.clone()
        };
        out.push(ResolvedController { controller, config });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_name_their_path() {
        let text = r#"{"schema_version": 1, "system": {"kind": "reduced", "params": {"alpha": 2.0, "beta": 0.75,
            "gamma": 0.5, "b": 30.0, "c": 2.5, "d": 1.18, "r": 1.65, "epsilon": 0.01, "gamm": 1.0}}}"#;
        let err = parse(text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("gamm"), "{err}");

        let err = parse(r#"{"schema_version": 1, "integration": {"method": {"kind": "rk4-fixed", "dt": 0.1}, "t_ed": 1}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("integration"), "{err}");
        assert!(parse(r#"{"schema_version": 2}"#).is_err());
        assert!(parse(r#"{"schema_version": 1}"#).is_ok());
    }

    #[test]
    fn validation_names_param_field() {
        let text = r#"{"schema_version": 1, "system": {"kind": "reduced", "params": {"alpha": 2.0, "beta": 0.75,
            "gamma": 0.5, "b": 30.0, "c": 2.5, "d": 1.0, "r": 1.65, "epsilon": 0.01}}}"#;
        let err = parse(text).unwrap().system().unwrap_err();
        assert!(err.to_string().contains("system.params.d"), "{err}");
    }

    #[test]
    fn named_planes() {
        assert_eq!(named_plane("alpha_beta", 10).unwrap().x.n, 10);
        assert!(named_plane("alpha_gamma", 5).is_some());
        assert!(named_plane("nope", 5).is_none());
    }
}
