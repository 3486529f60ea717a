use hopper::control::Passive;
use hopper::hybrid::constraint_jacobian;
use hopper::integrate::Simulator;
use hopper::optimize::{solve_hop, HopProblem};
use hopper::{
    DomainId, GuardKind, HybridGraph, IntegratorConfig, ModelParams, ModelParams32, State, State32, StopCondition,
    Variant,
};
use nalgebra::Vector3;

fn undamped(variant: Variant) -> ModelParams {
    let mut p = ModelParams::nominal(variant);
    p.body_damping = 0.0;
    p.parallel_damping = 0.0;
    p.series_damping = 0.0;
    p
}

/// Flight state with relaxed springs whose foot is `h` above the ground.
fn apex(p: &ModelParams, h: f64, domain: DomainId) -> State {
    State::new(Vector3::new(p.rest_length + h, 0.0, 0.0), Vector3::zeros(), domain)
}

#[test]
fn projectile_apex_in_free_flight() {
    let p = undamped(Variant::DoubleSpring);
    // D2 lies outside the selected cycle, so no guard can end the phase while
    // the mover sits at its rest position on the hardstop surface.
    let graph = HybridGraph::selected_cycle(Variant::DoubleSpring);
    let sim = Simulator::new(&p, &graph, &Passive);
    let v0 = 2.5;
    let s0 = State::new(Vector3::new(1.0, 0.0, 0.0), Vector3::new(v0, 0.0, 0.0), DomainId::D2);
    let phase = sim.integrate_domain(&s0, 0.0, 2.0, true).unwrap();
    let top = phase.last().state;
    let rise = top.q[0] - s0.q[0];
    let expected = v0 * v0 / (2.0 * p.gravity);
    assert!((rise / expected - 1.0).abs() < 1e-8, "{rise} vs {expected}");
    assert!((phase.duration - v0 / p.gravity).abs() < 1e-8);
}

#[test]
fn touchdown_speed_matches_free_fall() {
    let p = undamped(Variant::DoubleSpring);
    let graph = HybridGraph::selected_cycle(Variant::DoubleSpring);
    let sim = Simulator::new(&p, &graph, &Passive);
    for h in [0.05, 0.2, 0.5] {
        let phase = sim.integrate_domain(&apex(&p, h, DomainId::D1), 0.0, 5.0, false).unwrap();
        assert_eq!(phase.exit_event, Some((GuardKind::Touchdown, DomainId::D3)));
        let v = phase.last().state.foot_velocity();
        let expected = -(2.0 * p.gravity * h).sqrt();
        assert!((v / expected - 1.0).abs() < 1e-9, "h {h}: {v} vs {expected}");
    }
}

#[test]
fn passive_stance_pins_foot_and_conserves_energy() {
    let p = undamped(Variant::DoubleSpring);
    let graph = HybridGraph::full(Variant::DoubleSpring);
    let sim = Simulator::new(&p, &graph, &Passive);
    let z = p.rest_length - 0.02;
    let s0 = State::new(Vector3::new(z, 0.01, p.rest_length - z), Vector3::new(-1.2, 0.5, 1.2), DomainId::D3);
    let phase = sim.integrate_domain(&s0, 0.0, 1.0, false).unwrap();
    assert!(phase.samples.len() > 10);
    let e0 = p.mechanical_energy(&s0);
    for s in &phase.samples {
        let st = &s.state;
        assert!((st.q[0] + st.q[2] - p.rest_length).abs() < 1e-12);
        assert!((p.mechanical_energy(st) - e0).abs() < 1e-8 * e0.abs().max(1.0));
    }
}

#[test]
fn passive_hops_lose_height() {
    for variant in [Variant::DoubleSpring, Variant::SingleSpring] {
        let p = ModelParams::nominal(variant);
        let graph = HybridGraph::full(variant);
        let sim = Simulator::new(&p, &graph, &Passive);
        let flight = if variant == Variant::DoubleSpring { DomainId::D1 } else { DomainId::Flight };
        let stop = StopCondition { max_hops: 4, t_max: 10.0, max_ground_time: 2.0 };
        let traj = sim.simulate_hybrid(&apex(&p, 0.4, flight), 0.0, &stop).unwrap();
        assert!(traj.apexes.len() >= 2, "{variant:?}: {} apexes", traj.apexes.len());
        let mut prev = 0.4;
        for a in &traj.apexes {
            let h = p.foot_height(&a.state);
            assert!(h < prev, "{variant:?}: {h} after {prev}");
            prev = h;
        }
    }
}

#[test]
fn undamped_energy_changes_only_at_impacts() {
    // Without damping or input, every loss is a plastic reset.
    let p = undamped(Variant::SingleSpring);
    let graph = HybridGraph::full(Variant::SingleSpring);
    let config = IntegratorConfig::default().with_tolerance(1e-12, 1e-14);
    let sim = Simulator::with_config(&p, &graph, &Passive, config);
    let s0 = apex(&p, 0.3, DomainId::Flight);
    let traj = sim.simulate_hybrid(&s0, 0.0, &StopCondition::hops(10)).unwrap();
    assert_eq!(traj.apexes.len(), 10);
    let impact_loss: f64 =
        traj.resets.iter().map(|(pre, post)| p.kinetic_energy(&pre.qdot) - p.kinetic_energy(&post.qdot)).sum();
    let e0 = p.mechanical_energy(&s0);
    let e_end = p.mechanical_energy(&traj.final_state().unwrap());
    assert!(impact_loss > 0.0);
    assert!((e0 - e_end - impact_loss).abs() < 1e-8 * e0, "{} vs {impact_loss}", e0 - e_end);
}

#[test]
fn undamped_flight_energy_drift() {
    let p = undamped(Variant::DoubleSpring);
    let graph = HybridGraph::full(Variant::DoubleSpring);
    let sim = Simulator::new(&p, &graph, &Passive);
    let s0 = State::new(Vector3::new(3.0, 0.02, 0.01), Vector3::new(2.0, 0.3, -0.4), DomainId::D2);
    let phase = sim.integrate_domain(&s0, 0.0, 0.2, false).unwrap();
    let e0 = p.mechanical_energy(&s0);
    for s in &phase.samples {
        assert!((p.mechanical_energy(&s.state) - e0).abs() < 1e-8 * e0.abs());
    }
}

#[test]
fn optimized_orbit_repeats_for_twenty_hops() {
    let problem = HopProblem::new(ModelParams::nominal(Variant::DoubleSpring), 0.3);
    let sol = solve_hop(&problem, None).unwrap().require_converged().unwrap();
    let graph = HybridGraph::selected_cycle(Variant::DoubleSpring);
    let policy = sol.policy();
    let sim = Simulator::new(&problem.params, &graph, &policy);
    let traj = sim.simulate_hybrid(&sol.apex_state(), 0.0, &StopCondition::hops(20)).unwrap();
    assert_eq!(traj.apexes.len(), 20);
    for a in &traj.apexes {
        let h = problem.params.foot_height(&a.state);
        assert!((h - 0.3).abs() < 0.01 * 0.3, "apex {h}");
    }

    // Constraint velocities stay at the integration tolerance.
    let tol = IntegratorConfig::default().rtol;
    for phase in &traj.phases {
        let j = constraint_jacobian::<f64>(phase.domain);
        for s in &phase.samples {
            let scale = 1.0 + s.state.qdot.amax();
            assert!((&j * s.state.qdot).amax() < 10.0 * tol * scale);
        }
    }

    // Exactly one apex per hop, evenly spaced in time.
    let gaps: Vec<f64> = traj.apexes.windows(2).map(|w| w[1].t - w[0].t).collect();
    for g in &gaps {
        assert!((g - gaps[0]).abs() < 1e-3 * gaps[0]);
    }
}

#[test]
fn guards_are_located_tightly() {
    let p = ModelParams::nominal(Variant::DoubleSpring);
    let graph = HybridGraph::full(Variant::DoubleSpring);
    let sim = Simulator::new(&p, &graph, &Passive);
    let traj = sim.simulate_hybrid(&apex(&p, 0.3, DomainId::D1), 0.0, &StopCondition::hops(3)).unwrap();
    let mut checked = 0;
    for phase in &traj.phases {
        // Zero-length phases are left at once because their guard is already
        // negative on entry.
        if let (Some((guard, _)), true) = (phase.exit_event, phase.duration > 0.0) {
            let end = phase.last();
            let v = guard.value(&p, &end.state, end.u).unwrap() / guard.scale(&p);
            assert!(v.abs() < 1e-10, "{guard:?}: {v}");
            checked += 1;
        }
    }
    assert!(checked >= 6);
}

#[test]
fn identical_runs_are_bit_identical() {
    let p = ModelParams::nominal(Variant::DoubleSpring);
    let graph = HybridGraph::full(Variant::DoubleSpring);
    let sim = Simulator::new(&p, &graph, &Passive);
    let s0 = apex(&p, 0.25, DomainId::D1);
    let a = sim.simulate_hybrid(&s0, 0.0, &StopCondition::hops(3)).unwrap();
    let b = sim.simulate_hybrid(&s0, 0.0, &StopCondition::hops(3)).unwrap();
    assert_eq!(a, b);
}

/// End state of a smooth flight after `t_end`, for the order study.
fn flight_end(p: &ModelParams, config: IntegratorConfig, t_end: f64) -> State {
    let graph = HybridGraph::selected_cycle(Variant::DoubleSpring);
    let sim = Simulator::with_config(p, &graph, &Passive, config);
    let s0 = State::new(Vector3::new(3.0, 0.0, 0.01), Vector3::new(3.0, 0.0, -0.5), DomainId::D1);
    let phase = sim.integrate_domain(&s0, 0.0, t_end, false).unwrap();
    assert!(phase.exit_event.is_none());
    phase.last().state
}

#[test]
fn fixed_step_order_is_five() {
    let p = ModelParams::nominal(Variant::DoubleSpring);
    let t_end = 0.08;
    let reference = flight_end(&p, IntegratorConfig::default().with_tolerance(1e-14, 1e-16), t_end);
    let err = |h: f64| {
        let s = flight_end(&p, IntegratorConfig::fixed(h), t_end);
        (s.q - reference.q).amax().max((s.qdot - reference.qdot).amax() * 1e-2)
    };
    let steps = [1e-3, 5e-4, 2.5e-4];
    let errs: Vec<f64> = steps.iter().map(|&h| err(h)).collect();
    for w in errs.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!((order - 5.0).abs() < 0.5, "order {order} from {errs:?}");
    }
}

#[test]
fn single_precision_hops() {
    let p: ModelParams32 = ModelParams::nominal(Variant::DoubleSpring).cast();
    let graph = HybridGraph::full(Variant::DoubleSpring);
    let config = hopper::integrate::IntegratorConfig::<f32>::default().with_tolerance(1e-5, 1e-6);
    let config = hopper::integrate::IntegratorConfig { event_tol: 5e-7, h_min: 1e-7, ..config };
    let sim = Simulator::with_config(&p, &graph, &Passive, config);
    let s0 = State32::new(Vector3::new(p.rest_length + 0.3, 0.0, 0.0), Vector3::zeros(), DomainId::D1);
    let traj = sim.simulate_hybrid(&s0, 0.0, &hopper::integrate::StopCondition::hops(2)).unwrap();
    assert_eq!(traj.apexes.len(), 2);
    let h = p.foot_height(&traj.apexes[0].state);
    assert!(h > 0.0 && h < 0.3);
}
