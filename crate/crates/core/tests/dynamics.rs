use approx::assert_abs_diff_eq;
use canard_core::control::hamiltonian_classic;
use canard_core::manifold::FoldPoint;
use canard_core::{
    expand_at_fold, integrate, integrate_layer, manifold_roots, DecisionParamsReduced, IntegrationConfig,
    NormalFormParams, PerturbationSpec, Stability, State,
};

fn fig1(r: f64) -> DecisionParamsReduced {
    DecisionParamsReduced { alpha: 2.0, beta: 0.75, gamma: 0.5, b: 30.0, c: 2.5, d: 1.18, r, epsilon: 0.001 }
}

/// `y > 0` with `H(0, y) = level` on the classic canard family.
fn classic_start(level: f64, eps: f64) -> State {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hamiltonian_classic(State::new(0.0, mid), eps).unwrap() > level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    State::new(0.0, 0.5 * (lo + hi))
}

#[test]
fn rk4_conserves_the_classic_hamiltonian() {
    let eps = 0.01;
    let nf = NormalFormParams::new(1.0, -1.0, 1, eps);
    for level in [0.01, 1e-6] {
        let s0 = classic_start(level, eps);
        let h0 = hamiltonian_classic(s0, eps).unwrap();
        let mut sys = nf;
        let traj = integrate(&mut sys, s0, &IntegrationConfig::rk4(1e-4, 400.0, 100)).unwrap();
        let crossings = traj.states.windows(2).filter(|w| (w[0].x < 0.0) != (w[1].x < 0.0)).count();
        assert!(crossings >= 2, "less than one cycle at level {level}");
        let drift = traj
            .states
            .iter()
            .map(|s| (hamiltonian_classic(*s, eps).unwrap() - h0).abs() / h0.abs())
            .fold(0.0, f64::max);
        assert!(drift <= 1e-6, "drift {drift:e} at level {level}");
    }
}

#[test]
fn open_loop_relaxation_oscillation() {
    let mut p = fig1(1.62);
    let traj = integrate(&mut p, State::new(0.9, 29.0), &IntegrationConfig::rk4(1e-2, 20000.0, 10)).unwrap();
    let late: Vec<State> = traj.after(5000.0).map(|(_, s)| s).collect();
    let (lo, hi) = late.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.y), hi.max(s.y)));
    assert!(lo >= 24.0 && hi <= 30.0, "y range [{lo}, {hi}]");
    assert!(hi - lo > 1.0);
    assert!(traj.y_peaks(5000.0).len() >= 2);
}

#[test]
fn layer_flow_settles_on_an_attracting_root() {
    let p = fig1(1.65);
    let traj = integrate_layer(&p, State::new(0.2, 27.0), &IntegrationConfig::rk4(1e-2, 500.0, 100)).unwrap();
    let (_, end) = traj.last().unwrap();
    assert_eq!(end.y, 27.0);
    let roots = manifold_roots(&p, 27.0, 2000).unwrap().roots;
    let nearest = roots
        .iter()
        .min_by(|a, b| (a.x - end.x).abs().total_cmp(&(b.x - end.x).abs()))
        .unwrap();
    assert_eq!(nearest.stability, Stability::Attracting);
    assert_abs_diff_eq!(nearest.x, end.x, epsilon = 1e-6);
}

#[test]
fn expansion_recovers_perturbed_normal_form() {
    let nf = NormalFormParams::new(2.0, 3.0, 2, 0.01);
    let origin = FoldPoint { x_star: 0.0, y_star: 0.0, residual: 0.0 };
    for pert in [PerturbationSpec { delta_a: -0.5, delta_b: 0.5 }, PerturbationSpec { delta_a: 0.1, delta_b: 0.5 }] {
        let e = expand_at_fold(&nf.perturbed(&pert), &origin, 3).unwrap();
        assert_eq!(e.normal_form.k, 2);
        assert_abs_diff_eq!(e.normal_form.a_c, 2.0 + pert.delta_a, epsilon = 1e-6);
        assert_abs_diff_eq!(e.normal_form.b_c, 3.0 + pert.delta_b, epsilon = 1e-6);
    }
}

#[test]
fn on_manifold_at_slow_equilibrium_is_steady() {
    let mut p = fig1(1.65);
    let x = 1.0 / p.r;
    let y = canard_core::CriticalField::graph_y(&p, x).unwrap().unwrap();
    let traj = integrate(&mut p, State::new(x, y), &IntegrationConfig::rk4(1e-2, 50.0, 100)).unwrap();
    let (_, end) = traj.last().unwrap();
    assert_abs_diff_eq!(end.x, x, epsilon = 1e-9);
    assert_abs_diff_eq!(end.y, y, epsilon = 1e-9);
}
