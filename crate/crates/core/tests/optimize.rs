use hopper::control::{ControlSignal, Passive};
use hopper::integrate::Simulator;
use hopper::optimize::{solve_hop, transcribe, validate_solution, HopProblem, HopSolution};
use hopper::{DomainId, HybridGraph, IntegratorConfig, ModelParams, State, StopCondition, Variant};
use nalgebra::Vector3;

fn solve(variant: Variant, h: f64) -> (HopProblem, HopSolution) {
    let problem = HopProblem::new(ModelParams::nominal(variant), h);
    let sol = solve_hop(&problem, None).unwrap();
    assert!(sol.converged, "{variant:?} at {h}: {:?}", sol.diagnostics);
    (problem, sol)
}

#[test]
fn integrator_trajectory_satisfies_the_defects() {
    // An unactuated hop keeps the control knots exact, so the defects only
    // measure the collocation error, which vanishes as the mesh refines.
    let params = ModelParams::nominal(Variant::DoubleSpring);
    let graph = HybridGraph::selected_cycle(Variant::DoubleSpring);
    let config = IntegratorConfig::default().with_tolerance(1e-13, 1e-15);
    let sim = Simulator::with_config(&params, &graph, &Passive, config);
    let apex = State::new(Vector3::new(params.rest_length + 0.3, 0.0, 0.0), Vector3::zeros(), DomainId::D1);
    let traj = sim.simulate_hybrid(&apex, 0.0, &StopCondition::hops(1)).unwrap();

    let problem = HopProblem::new(params, 0.3);
    let mut previous = f64::INFINITY;
    for knots in [50, 100, 200] {
        let tr = transcribe(&problem.clone().with_knots(knots)).unwrap();
        let x = tr.pack_trajectory(&traj, &Passive).unwrap();
        let r = tr.residuals(&x);
        assert!(r.defect < previous, "{knots} knots: {} after {previous}", r.defect);
        assert!(r.junction < 1e-8 && r.guard < 1e-8, "{r:?}");
        previous = r.defect;
    }
    assert!(previous < 1e-6, "defect {previous}");
}

#[test]
fn solutions_survive_resimulation() {
    for variant in [Variant::DoubleSpring, Variant::SingleSpring] {
        let (problem, sol) = solve(variant, 0.3);
        assert!(sol.diagnostics.residuals.max_equality() < 1e-6);
        assert!(sol.peak_force() <= problem.params.force_limit);
        let report = validate_solution(&problem.params, &sol);
        assert!(report.max_state_deviation < 0.01, "{variant:?}: {report:?}");
        assert!(report.apex_clearance_error < 0.01, "{variant:?}: {report:?}");
        assert!(report.guard_residual < 1e-6, "{variant:?}: {report:?}");
        for v in [
            report.max_state_deviation,
            report.guard_residual,
            report.periodicity_residual,
            report.apex_clearance_error,
            report.constraint_violation,
        ] {
            assert!(v >= 0.0);
        }
        // Solutions travel as JSON; the dense interpolants are not serialized.
        let back = HopSolution::from_json(&sol.to_json().unwrap()).unwrap();
        assert_eq!((&back.segments, &back.control, back.cost), (&sol.segments, &sol.control, sol.cost));
        assert_eq!((&back.params, &back.diagnostics), (&sol.params, &sol.diagnostics));
        assert_eq!(back.trajectory.apexes, sol.trajectory.apexes);
    }
}

#[test]
fn zero_control_breaks_periodicity() {
    let (problem, sol) = solve(Variant::DoubleSpring, 0.3);
    let good = validate_solution(&problem.params, &sol);
    let mut idle = sol.clone();
    idle.control = ControlSignal::zero(sol.control.scope.clone());
    let bad = validate_solution(&problem.params, &idle);
    assert!(bad.periodicity_residual > 1e-2, "{bad:?}");
    assert!(bad.periodicity_residual > 10.0 * good.periodicity_residual);
    assert!(bad.apex_clearance_error > 0.05);
}

#[test]
fn warm_start_needs_fewer_iterations() {
    let (_, base) = solve(Variant::DoubleSpring, 0.3);
    let next = HopProblem::new(ModelParams::nominal(Variant::DoubleSpring), 0.31);
    let cold = solve_hop(&next, None).unwrap();
    let warm = solve_hop(&next, Some(&base)).unwrap();
    assert!(cold.converged && warm.converged);
    assert!(warm.diagnostics.iterations < cold.diagnostics.iterations, "{} vs {}", warm.diagnostics.iterations, cold.diagnostics.iterations);
    assert!((warm.cost - cold.cost).abs() < 1e-4 * cold.cost);
}

#[test]
fn trailing_zero_knots_leave_the_cost_alone() {
    let (problem, sol) = solve(Variant::DoubleSpring, 0.3);
    let graph = HybridGraph::selected_cycle(Variant::DoubleSpring);
    let realized = |control: &ControlSignal<f64>| {
        let mut s = sol.clone();
        s.control = control.clone();
        let policy = s.policy();
        let sim = Simulator::new(&problem.params, &graph, &policy);
        let traj = sim.simulate_hybrid(&sol.apex_state(), 0.0, &StopCondition::hops(1)).unwrap();
        let samples = traj.resample(&problem.params, &policy, 1e-5).unwrap();
        samples.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1.u.powi(2) + w[1].1.u.powi(2))).sum::<f64>()
    };
    let base = realized(&sol.control);
    let mut knots = sol.control.knots.clone();
    let end = sol.phase_durations[1..].iter().sum::<f64>();
    knots.extend([(end + 0.01, 0.0), (end + 0.02, 0.0), (end + 0.03, 0.0)]);
    let padded = ControlSignal::new(knots, sol.control.scope.clone()).unwrap();
    assert!((realized(&padded) / base - 1.0).abs() < 1e-9);
    assert!((base / sol.cost - 1.0).abs() < 0.01, "{base} vs {}", sol.cost);
}

#[test]
fn stance_force_assists_the_parallel_spring() {
    // One push while the parallel spring compresses, one pull while it
    // extends, switching near maximum compression.
    let (_, sol) = solve(Variant::DoubleSpring, 0.3);
    let stance = sol.segments.iter().find(|s| s.domain == DomainId::D3).unwrap();
    let f = &stance.forces;
    let peak = f.iter().cloned().fold(0.0, f64::max);
    let signs: Vec<i32> = f.iter().filter(|u| u.abs() > 1e-3 * peak).map(|u| if *u > 0.0 { 1 } else { -1 }).collect();
    let switches = signs.windows(2).filter(|w| w[0] != w[1]).count();
    assert_eq!((signs[0], switches, *signs.last().unwrap()), (1, 1, -1), "{f:?}");
    let switch = (1..f.len()).find(|&k| f[k] < 0.0).unwrap();
    let y_peak = (0..f.len()).max_by(|&a, &b| stance.states[a][1].total_cmp(&stance.states[b][1])).unwrap();
    let lag = (stance.times[switch] - stance.times[y_peak]).abs();
    assert!(lag < 0.15 * stance.duration, "force switches at knot {switch}, spring peaks at {y_peak}");
}

#[test]
fn peak_force_grows_with_clearance() {
    for variant in [Variant::DoubleSpring, Variant::SingleSpring] {
        let peaks: Vec<f64> = [0.1, 0.2, 0.3, 0.4, 0.5].iter().map(|&h| solve(variant, h).1.peak_force()).collect();
        assert!(peaks.windows(2).all(|w| w[1] > w[0]), "{variant:?}: {peaks:?}");
    }
}
