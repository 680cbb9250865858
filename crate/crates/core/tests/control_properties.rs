use canard_core::control::{
    fast_control_u, hamiltonian_delta, hamiltonian_general, hamiltonian_perturbed, joint_fast_slow, level_residual,
};
use canard_core::{
    convergence_report, integrate, target_h, ClosedLoop, ControlLaw, Controller, IntegrationConfig, NormalFormParams,
    PerturbationSpec, Schedule, State, ValidityRegion,
};
use proptest::prelude::*;

fn fig4() -> NormalFormParams {
    NormalFormParams::new(2.0, 3.0, 2, 0.01)
}

fn fig4_loop() -> ClosedLoop<NormalFormParams> {
    let nf = fig4();
    let c = Controller::new("nf", ControlLaw::FastOnly, State::new(0.0, 0.0), nf, 10.0, 7.0, None, ValidityRegion::unbounded())
        .unwrap();
    ClosedLoop::new(nf, vec![c], &Schedule::constant(Some("nf"))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturbed_hamiltonian_splits(
        x in -0.8..0.8f64,
        y in -1.0..1.0f64,
        da in -0.5..0.5f64,
        db in -0.5..0.5f64,
    ) {
        let nf = fig4();
        let pert = PerturbationSpec { delta_a: da, delta_b: db };
        let s = State::new(x, y);
        let h = hamiltonian_general(s, &nf, State::new(0.0, 0.0)).unwrap();
        let hp = hamiltonian_perturbed(s, &nf, &pert).unwrap();
        let hd = hamiltonian_delta(s, &nf, &pert).unwrap();
        let scale = h.abs().max(hp.abs()).max(hd.abs()).max(f64::MIN_POSITIVE);
        prop_assert!((hp - h - hd).abs() <= 1e-12 * scale);
    }

    #[test]
    fn control_vanishes_on_the_fold_line(y in 28.0..29.5f64, gain in 1.0..2000.0f64, c_c in 0.5..5.0f64) {
        let nf = NormalFormParams::new(1.64217791, 0.10092397, 1, 0.01);
        let origin = State::new(0.6162855097580961, 28.665365130124908);
        let h = target_h(&nf, c_c).unwrap();
        let region = ValidityRegion::unbounded();
        if let Ok(u) = fast_control_u(State::new(origin.x, y), &nf, origin, gain, &h, &region) {
            prop_assert_eq!(u, 0.0);
        }
        if let Ok((u, v)) = joint_fast_slow(State::new(origin.x, y), &nf, origin, gain, &h, 1.62, &region) {
            prop_assert_eq!(u, 0.0);
            prop_assert!((v + (1.0 - 1.62 * origin.x)).abs() <= 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // |H - h| never grows along closed-loop runs of the quartic normal form.
    #[test]
    fn lyapunov_surrogate_decreases(x in 0.05..1.2f64, y in -0.4..0.4f64) {
        let mut sys = fig4_loop();
        let cfg = IntegrationConfig::rk45(1e-10, 1e-12, 20.0);
        let traj = integrate(&mut sys, State::new(x, y), &cfg).unwrap();
        let report = convergence_report(&traj, &sys.controllers, 1e-8, 1e-9);
        prop_assert_eq!(report.monotonicity_violations, 0);
        let first = traj.observations[0].unwrap();
        let last = traj.observations.last().unwrap().unwrap();
        // Allowed growth: integration error relative to the size of the terms of H.
        let scale = traj.observations.iter().flatten().map(|o| o.log_hamiltonian_scale).fold(f64::NEG_INFINITY, f64::max);
        let bound = first.log_abs_level_error.max(1e-9f64.ln() + scale) + 2f64.ln();
        prop_assert!(last.log_abs_level_error <= bound, "{:?} {:?}", first, last);
        let c = &sys.controllers[0];
        prop_assert!(level_residual(traj.states[0], &c.normal_form, c.origin, &c.level).is_finite());
    }
}
