use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use canard_core::control::{ControlError, Robustness, Schedule};
use canard_core::expansion::{expand_at_fold, expand_with_order, Expansion};
use canard_core::integrate::IntegrateError;
use canard_core::manifold::{find_folds, sample_manifold, CriticalField, FoldPoint};
use canard_core::model::{Event, ModelError, PerturbedNormalForm};
use canard_core::sweep::{
    csv_record, read_cells, sweep_cells, write_summary, CellResult, RegionMap, SweepSpec, SweepSummary, CSV_HEADER,
};
use canard_core::{
    control::robustness_check, convergence_report, integrate, ClosedLoop, ConvergenceReport, DecisionParamsFull,
    DecisionParamsReduced, FastSlowSystem, NormalFormParams, PerturbationSpec, State, Trajectory,
};
use serde::Serialize;

use crate::config::{resolve_controllers, AnalysisConfig, Config, SweepConfig, SystemConfig};
use crate::error::CliError;

/// Open-loop plant selected by the config.
#[derive(Debug, Clone, Copy)]
pub enum Plant {
    Full(DecisionParamsFull),
    Reduced(DecisionParamsReduced),
    NormalForm(NormalFormParams),
    Perturbed(PerturbedNormalForm),
}

impl Plant {
    pub fn new(s: &SystemConfig) -> Self {
        match *s {
            SystemConfig::Full { params } => Self::Full(params),
            SystemConfig::Reduced { params } => Self::Reduced(params),
            SystemConfig::NormalForm { params } => Self::NormalForm(params.params()),
            SystemConfig::PerturbedNormalForm { params, perturbation } => {
                Self::Perturbed(PerturbedNormalForm { nf: params.params(), pert: perturbation })
            }
        }
    }
}

impl FastSlowSystem for Plant {
    fn rhs(&self, t: f64, s: State) -> Result<(f64, f64), ModelError> {
        match self {
            Self::Full(p) => p.rhs(t, s),
            Self::Reduced(p) => p.rhs(t, s),
            Self::NormalForm(p) => p.rhs(t, s),
            Self::Perturbed(p) => p.rhs(t, s),
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["t", "x", "y", "u", "v", "H"])?;
    for ((t, s), obs) in traj.times.iter().zip(&traj.states).zip(&traj.observations) {
        let (u, v, h) = match obs {
            Some(o) => (fmt(o.u), fmt(o.v), fmt(o.hamiltonian)),
            None => (String::new(), String::new(), String::new()),
        };
        w.write_record([fmt(*t), fmt(s.x), fmt(s.y), u, v, h])?;
    }
    w.flush()?;
    Ok(())
}

fn manifold_range(cfg: &Config, traj: &Trajectory, s0: State) -> (f64, f64) {
    if let Some(r) = cfg.manifold.y_range {
        return r;
    }
    let (lo, hi) = traj
        .states
        .iter()
        .chain(std::iter::once(&s0))
        .filter(|s| s.y.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.y), hi.max(s.y)));
    let pad = if hi > lo { 0.1 * (hi - lo) } else { 1.0 };
    (lo - pad, hi + pad)
}

fn write_manifold(path: &Path, field: &dyn CriticalField, cfg: &Config, y_range: (f64, f64)) -> Result<(), CliError> {
    let samples = sample_manifold(field, y_range, cfg.manifold.levels, cfg.manifold.grid_cells)
        .map_err(|e| CliError::Numerical(format!("manifold sampling: {e}")))?;
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["y", "x", "stability"])?;
    for s in &samples {
        for r in &s.roots {
            w.write_record([fmt(s.y), fmt(r.x), r.stability.as_str().to_owned()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RunSummary<'a> {
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    samples: usize,
    steps: usize,
    rejected: usize,
    t_final: Option<f64>,
    final_state: Option<State>,
    y_min: Option<f64>,
    y_max: Option<f64>,
    events: &'a [Event],
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<ConvergenceReport>,
}

impl<'a> RunSummary<'a> {
    fn new(traj: &'a Trajectory, error: Option<&IntegrateError>, report: Option<ConvergenceReport>) -> Self {
        let ys = traj.states.iter().map(|s| s.y).filter(|y| y.is_finite());
        let y_min = ys.clone().reduce(f64::min);
        let y_max = ys.reduce(f64::max);
        let last = traj.last();
        Self {
            status: if error.is_some() { "failed" } else { "ok" },
            error: error.map(|e| e.to_string()),
            samples: traj.len(),
            steps: traj.steps,
            rejected: traj.rejected,
            t_final: last.map(|l| l.0),
            final_state: last.map(|l| l.1),
            y_min,
            y_max,
            events: &traj.events,
            report,
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    serde_json::to_writer_pretty(&mut lock, value)?;
    writeln!(lock)?;
    Ok(())
}

fn split_result(r: Result<Trajectory, IntegrateError>) -> Result<(Trajectory, Option<IntegrateError>), CliError> {
    match r {
        Ok(t) => Ok((t, None)),
        Err(IntegrateError::Config(p)) => Err(CliError::config(format!("integration.{}", p.field), p.reason)),
        Err(e) => {
            let partial = e.partial().cloned().unwrap_or_default();
            Ok((partial, Some(e)))
        }
    }
}

fn finish_run(
    out: &Path,
    cfg: &Config,
    field: &dyn CriticalField,
    s0: State,
    traj: &Trajectory,
    error: Option<IntegrateError>,
    report: Option<ConvergenceReport>,
) -> Result<(), CliError> {
    write_trajectory(&out.join("trajectory.csv"), traj)?;
    let range = manifold_range(cfg, traj, s0);
    write_manifold(&out.join("manifold.csv"), field, cfg, range)?;
    print_json(&RunSummary::new(traj, error.as_ref(), report))?;
    match error {
        Some(e) => Err(CliError::Numerical(e.to_string())),
        None => Ok(()),
    }
}

fn prepare(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))
}

/// Resolved config with the manifold range filled in.
fn resolved_manifold(cfg: &Config, traj: &Trajectory, s0: State) -> Config {
    let mut r = cfg.clone();
    r.manifold.y_range = Some(manifold_range(cfg, traj, s0));
    r
}

pub fn simulate(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let system = cfg.system()?;
    let s0 = cfg.initial_state()?;
    let icfg = cfg.integration()?;
    cfg.validate_manifold()?;
    prepare(out)?;
    let mut plant = Plant::new(system);
    let (traj, error) = split_result(integrate(&mut plant, s0, &icfg))?;
    write_json(&out.join("run.json"), &resolved_manifold(cfg, &traj, s0))?;
    finish_run(out, cfg, &*system.field(), s0, &traj, error, None)
}

pub fn control(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let system = cfg.system()?;
    let s0 = cfg.initial_state()?;
    let icfg = cfg.integration()?;
    cfg.validate_manifold()?;
    cfg.validate_analysis()?;
    let control = cfg.control.as_ref().ok_or_else(|| CliError::config("control", "missing"))?;
    let resolved = resolve_controllers(control, system, &cfg.analysis)?;
    let schedule = control
        .schedule
        .clone()
        .unwrap_or_else(|| Schedule::constant(Some(&resolved[0].controller.name)));
    let controllers: Vec<_> = resolved.iter().map(|r| r.controller.clone()).collect();
    let mut closed = ClosedLoop::new(Plant::new(system), controllers, &schedule).map_err(|e| match e {
        ControlError::Param(p) => CliError::config(p.field, p.reason),
        other => CliError::config("control", other.to_string()),
    })?;

    let mut full = cfg.clone();
    let c = full.control.as_mut().expect("checked above");
    c.controllers = resolved.iter().map(|r| r.config.clone()).collect();
    c.schedule = Some(schedule);
    c.design = Some(*control.design.as_ref().unwrap_or(system));

    prepare(out)?;
    if control.mode == crate::config::ControlMode::Off {
        let mut plant = Plant::new(system);
        let (traj, error) = split_result(integrate(&mut plant, s0, &icfg))?;
        write_json(&out.join("run.json"), &resolved_manifold(&full, &traj, s0))?;
        return finish_run(out, cfg, &*system.field(), s0, &traj, error, None);
    }
    let (traj, error) = split_result(integrate(&mut closed, s0, &icfg))?;
    write_json(&out.join("run.json"), &resolved_manifold(&full, &traj, s0))?;
    let report = convergence_report(&traj, &closed.controllers, control.tolerance, control.slack);
    write_json(&out.join("report.json"), &report)?;

    let mut w = csv::Writer::from_writer(create(&out.join("target_level.csv"))?);
    w.write_record(["controller", "x", "y"])?;
    for c in &closed.controllers {
        for (x, y) in c.level_curve(400) {
            w.write_record([c.name.clone(), fmt(x), fmt(y)])?;
        }
    }
    w.flush()?;
    finish_run(out, cfg, &*system.field(), s0, &traj, error, Some(report))
}

/// A fold (or requested point) with its local expansion.
pub struct FoldEntry {
    pub fold: FoldPoint,
    pub expansion: Result<Expansion, String>,
}

fn expand(field: &dyn CriticalField, fold: &FoldPoint, a: &AnalysisConfig) -> Result<Expansion, String> {
    match a.order {
        Some(k) => expand_with_order(field, fold, k),
        None => expand_at_fold(field, fold, a.k_max),
    }
    .map_err(|e| e.to_string())
}

/// Folds of `system` (or the point `analysis.at`) with expansions.
pub fn analyse(system: &SystemConfig, a: &AnalysisConfig) -> Result<Vec<FoldEntry>, CliError> {
    let field = system.field();
    let points = match a.at {
        Some(p) => {
            let f = field.field(p.x, p.y).map_err(|e| CliError::Numerical(e.to_string()))?;
            let g = field.field_dx(p.x, p.y).map_err(|e| CliError::Numerical(e.to_string()))?;
            vec![FoldPoint { x_star: p.x, y_star: p.y, residual: f.abs().max(g.abs()) }]
        }
        None => find_folds(&*field, &a.search).map_err(|e| CliError::Numerical(e.to_string()))?,
    };
    Ok(points.into_iter().map(|fold| FoldEntry { expansion: expand(&*field, &fold, a), fold }).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldReport {
    pub x_star: f64,
    pub y_star: f64,
    /// `max(|F|, |dF/dx|)` at the point.
    pub residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub derivatives: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision_warning: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expansion_error: Option<String>,
}

impl FoldReport {
    fn new(e: &FoldEntry, with_derivatives: bool) -> Self {
        let mut r = Self {
            x_star: e.fold.x_star,
            y_star: e.fold.y_star,
            residual: e.fold.residual,
            k: None,
            a_c: None,
            b_c: None,
            sigma: None,
            derivatives: None,
            precision_warning: None,
            expansion_error: None,
        };
        match &e.expansion {
            Ok(x) => {
                let nf = &x.normal_form;
                r.k = Some(nf.k);
                r.a_c = Some(nf.a_c);
                r.b_c = Some(nf.b_c);
                r.sigma = Some(nf.sigma);
                r.precision_warning = Some(x.precision_warning);
                if with_derivatives {
                    r.derivatives = Some(x.derivatives.clone());
                }
            }
            Err(msg) => r.expansion_error = Some(msg.clone()),
        }
        r
    }
}

#[derive(Serialize)]
struct FoldsOutput {
    count: usize,
    folds: Vec<FoldReport>,
}

pub fn folds(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let system = cfg.system()?;
    cfg.validate_analysis()?;
    cfg.validate_manifold()?;
    let entries = analyse(system, &cfg.analysis)?;
    let report = FoldsOutput { count: entries.len(), folds: entries.iter().map(|e| FoldReport::new(e, false)).collect() };
    prepare(out)?;
    let mut resolved = cfg.clone();
    let range = cfg.manifold.y_range.unwrap_or((cfg.analysis.search.y_lo, cfg.analysis.search.y_hi));
    resolved.manifold.y_range = Some(range);
    write_json(&out.join("run.json"), &resolved)?;
    write_json(&out.join("folds.json"), &report)?;
    write_manifold(&out.join("manifold.csv"), &*system.field(), cfg, range)?;
    print_json(&report)
}

#[derive(Serialize)]
struct Comparison {
    index: usize,
    fold: FoldReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    perturbation: Option<PerturbationSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    robustness: Option<Robustness>,
}

#[derive(Serialize)]
struct ExpandOutput {
    count: usize,
    folds: Vec<FoldReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    compare: Vec<Comparison>,
}

pub fn expand_cmd(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let system = cfg.system()?;
    cfg.validate_analysis()?;
    let entries = analyse(system, &cfg.analysis)?;
    let mut compare = Vec::new();
    if let Some(other) = &cfg.analysis.compare {
        let theirs = analyse(other, &cfg.analysis)?;
        for (i, (mine, theirs)) in entries.iter().zip(&theirs).enumerate() {
            let (perturbation, robustness) = match (&mine.expansion, &theirs.expansion) {
                (Ok(a), Ok(b)) => {
                    let p = PerturbationSpec::between(&a.normal_form, &b.normal_form);
                    (Some(p), Some(robustness_check(&a.normal_form, &p)))
                }
                _ => (None, None),
            };
            compare.push(Comparison { index: i, fold: FoldReport::new(theirs, true), perturbation, robustness });
        }
    }
    let report = ExpandOutput {
        count: entries.len(),
        folds: entries.iter().map(|e| FoldReport::new(e, true)).collect(),
        compare,
    };
    prepare(out)?;
    write_json(&out.join("run.json"), cfg)?;
    write_json(&out.join("expansion.json"), &report)?;
    print_json(&report)
}

pub fn resolve_workers(cli: Option<usize>, sweep: &SweepConfig) -> usize {
    cli.unwrap_or(sweep.workers)
}

/// Cells of an earlier partial run that belong to `spec`.
fn reusable_cells(out: &Path, spec: &SweepSpec) -> Result<Vec<CellResult>, CliError> {
    let csv_path = out.join("regions.csv");
    let run_path = out.join("run.json");
    if !csv_path.exists() || !run_path.exists() {
        return Ok(Vec::new());
    }
    let same_spec = crate::config::load(&run_path)
        .ok()
        .and_then(|c| c.sweep)
        .and_then(|s| s.resolve().ok())
        .is_some_and(|s| &s == spec);
    if !same_spec {
        return Ok(Vec::new());
    }
    let bytes = fs::read(&csv_path).map_err(|e| CliError::Io(format!("{}: {e}", csv_path.display())))?;
    // Only complete lines count; an interrupted write may leave a short one.
    let end = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let cells = match read_cells(&bytes[..end]) {
        Ok(c) => c,
        Err(_) => return Ok(Vec::new()),
    };
    let mut seen = vec![false; spec.n_cells()];
    let mut keep = Vec::new();
    for c in cells {
        if c.ix >= spec.x.n || c.iy >= spec.y.n {
            continue;
        }
        let i = spec.index(c.ix, c.iy);
        if seen[i] || c.px != spec.x.center(c.ix) || c.py != spec.y.center(c.iy) {
            continue;
        }
        seen[i] = true;
        keep.push(c);
    }
    Ok(keep)
}

fn write_cells(path: &Path, cells: &[&CellResult], header: bool, append: bool) -> Result<(), CliError> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    if header {
        w.write_record(CSV_HEADER)?;
    }
    for c in cells {
        w.write_record(csv_record(c))?;
    }
    w.flush()?;
    Ok(())
}

/// Cells per checkpoint when sweeping.
const CHUNK: usize = 512;

pub fn sweep(cfg: &Config, out: &Path, workers: Option<usize>) -> Result<(), CliError> {
    let sc = cfg.sweep.as_ref().ok_or_else(|| CliError::config("sweep", "missing"))?;
    let spec = sc.resolve()?;
    let workers = resolve_workers(workers, sc);
    prepare(out)?;
    let reused = reusable_cells(out, &spec)?;

    let mut resolved = cfg.clone();
    resolved.sweep = Some(SweepConfig { plane: None, n: None, spec: Some(spec.clone()), workers: sc.workers });
    write_json(&out.join("run.json"), &resolved)?;

    let csv_path = out.join("regions.csv");
    let mut have = vec![false; spec.n_cells()];
    for c in &reused {
        have[spec.index(c.ix, c.iy)] = true;
    }
    write_cells(&csv_path, &reused.iter().collect::<Vec<_>>(), true, false)?;
    let missing: Vec<usize> = (0..spec.n_cells()).filter(|&i| !have[i]).collect();
    let mut cells = reused;
    let n_reused = cells.len();
    for chunk in missing.chunks(CHUNK) {
        let done = sweep_cells(&spec, chunk, workers);
        write_cells(&csv_path, &done.iter().collect::<Vec<_>>(), false, true)?;
        cells.extend(done);
    }

    let map = RegionMap::from_cells(spec, cells)?;
    let tmp: PathBuf = out.join("regions.csv.tmp");
    map.write_csv(create(&tmp)?)?;
    fs::rename(&tmp, &csv_path).map_err(|e| CliError::Io(format!("{}: {e}", csv_path.display())))?;
    let summary = SweepSummary::new(&map, missing.len(), n_reused);
    let mut w = create(&out.join("summary.json"))?;
    write_summary(&summary, &mut w)?;
    writeln!(w)?;
    w.flush()?;
    print_json(&summary)
}
