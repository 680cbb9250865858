//! Fast-slow analysis and canard control for a two-strategy resource
//! consumption model.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: states, parameter sets and right-hand sides.
//! - [`integrate`]: explicit Runge-Kutta integration with scheduled switches.
//! - [`manifold`]: critical manifold roots, folds, asymptotes.
//! - [`expansion`]: finite-difference normal-form data at a fold.
//! - [`control`]: Hamiltonian level sets, controllers and closed loops.
//! - [`sweep`]: two-parameter fold-count maps.
//! - [`parallel`]: indexed parallel map used by sweeps.

pub mod control;
pub mod expansion;
pub mod integrate;
pub mod manifold;
pub mod model;
pub mod parallel;
pub mod sweep;

pub use control::{
    convergence_report, target_h, ClosedLoop, ControlLaw, Controller, ConvergenceReport, Robustness,
    Schedule, Switch, TargetLevel, ValidityRegion,
};
pub use expansion::{expand_at_fold, expand_with_order, fd_derivative, Expansion, FdEstimate};
pub use integrate::{integrate, integrate_layer, IntegrationConfig, Method, Trajectory};
pub use manifold::{
    asymptotes, find_folds, graph_folds, manifold_roots, CriticalField, FoldPoint, FoldSearch, ManifoldSample,
    Stability,
};
pub use model::{
    DecisionParamsFull, DecisionParamsReduced, FastSlowSystem, ModelError, NormalFormParams,
    PerturbationSpec, PerturbedNormalForm, State,
};
pub use sweep::{sweep, CellClass, RegionMap, SweepSpec, SweepSummary};
