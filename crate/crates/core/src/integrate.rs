//! Per-domain integration with event location, and hybrid simulation that
//! chains domains through reset maps.
//!
//! The integrator is Dormand–Prince 5(4) with Hairer's continuous extension.
//! Guards are bracketed at every accepted step on the dense output, then
//! located by Illinois iteration on the length of a true Runge–Kutta step, so
//! the event state is an integrator state rather than an interpolated one.

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::Actuation;
use crate::hybrid::{self, constrained_dynamics, ContactForces, DomainId, GuardKind, HybridError, HybridGraph};
use crate::model::{ModelParams, State};
use crate::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Hybrid(#[from] HybridError),
    #[error("step size fell below the minimum at t = {t} in {domain}")]
    StepFailure { domain: DomainId, t: f64 },
    #[error("step budget exhausted in {0}")]
    MaxSteps(DomainId),
    #[error("state norm {norm} exceeded the bound at t = {t}")]
    SimulationDiverged { t: f64, norm: f64 },
    #[error("foot did not leave the ground within {0} s")]
    NoLiftoff(f64),
    #[error("more than {0} consecutive zero-duration phases")]
    Zeno(usize),
    #[error("initial state violates the constraints of {domain} (residual {residual})")]
    InconsistentStart { domain: DomainId, residual: f64 },
    #[error("no admissible transition for {guard:?} from {domain}")]
    NoEdge { domain: DomainId, guard: GuardKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct IntegratorConfig<T> {
    pub rtol: T,
    pub atol: T,
    pub h_init: T,
    pub h_min: T,
    pub h_max: T,
    /// Take fixed steps of this size without error control.
    pub fixed_step: Option<T>,
    /// Guards are located to `|value| < event_tol * scale`.
    pub event_tol: T,
    pub max_steps: usize,
    /// Simulation is declared divergent past this state norm.
    pub state_bound: T,
    pub max_instant_phases: usize,
}

impl<T: Real> Default for IntegratorConfig<T> {
    fn default() -> Self {
        Self {
            rtol: T::lit(1e-10),
            atol: T::lit(1e-12),
            h_init: T::lit(1e-4),
            h_min: T::lit(1e-14),
            h_max: T::lit(1e-2),
            fixed_step: None,
            event_tol: T::lit(1e-10),
            max_steps: 2_000_000,
            state_bound: T::lit(1e3),
            max_instant_phases: 8,
        }
    }
}

impl<T: Real> IntegratorConfig<T> {
    pub fn with_tolerance(mut self, rtol: T, atol: T) -> Self {
        self.rtol = rtol;
        self.atol = atol;
        self
    }

    pub fn fixed(h: T) -> Self {
        Self { fixed_step: Some(h), ..Self::default() }
    }
}

/// One recorded point of a phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Sample<T: Real> {
    /// Time since domain entry, s.
    pub t: T,
    pub state: State<T>,
    pub u: T,
    /// Constraint forces in Jacobian row order.
    pub forces: Vec<T>,
}

impl<T: Real> Sample<T> {
    pub fn ground_force(&self) -> T {
        if !self.state.domain.has_ground_contact() {
            return T::zero();
        }
        let idx = self.state.domain.contacts().iter().position(|c| *c == hybrid::ContactKind::Ground);
        idx.and_then(|i| self.forces.get(i).copied()).unwrap_or_else(T::zero)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DenseStep<T: Real> {
    t0: T,
    h: T,
    coeffs: [Vector6<T>; 5],
}

impl<T: Real> DenseStep<T> {
    fn eval(&self, theta: T) -> Vector6<T> {
        let s1 = T::one() - theta;
        let [r1, r2, r3, r4, r5] = &self.coeffs;
        r1 + (r2 + (r3 + (r4 + r5 * s1) * theta) * s1) * theta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PhaseTrajectory<T: Real> {
    pub domain: DomainId,
    /// Global time at domain entry.
    pub t_start: T,
    /// Policy time at domain entry.
    pub clock_start: T,
    pub samples: Vec<Sample<T>>,
    pub exit_event: Option<(GuardKind, DomainId)>,
    pub duration: T,
    /// Flight apexes (body velocity crossing zero downward) inside the phase.
    pub apexes: Vec<Sample<T>>,
    #[serde(skip)]
    dense: Vec<DenseStep<T>>,
}

impl<T: Real> PhaseTrajectory<T> {
    pub fn first(&self) -> &Sample<T> {
        &self.samples[0]
    }

    pub fn last(&self) -> &Sample<T> {
        self.samples.last().expect("phase has at least one sample")
    }

    /// State at local time `t` from the dense output.
    pub fn state_at(&self, t: T) -> Option<State<T>> {
        if t < T::zero() || t > self.duration {
            return None;
        }
        let domain = self.domain;
        let to_state = |x: Vector6<T>| State {
            q: Vector3::new(x[0], x[1], x[2]),
            qdot: Vector3::new(x[3], x[4], x[5]),
            domain,
            t_local: t,
        };
        if self.dense.is_empty() || t >= self.duration {
            let mut s = self.last().state;
            s.t_local = t;
            return Some(s);
        }
        let i = self.dense.partition_point(|d| d.t0 + d.h < t).min(self.dense.len() - 1);
        let d = &self.dense[i];
        let theta = ((t - d.t0) / d.h).max(T::zero()).min(T::one());
        Some(to_state(d.eval(theta)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ApexRecord<T: Real> {
    /// Global time.
    pub t: T,
    pub state: State<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct HybridTrajectory<T: Real> {
    pub phases: Vec<PhaseTrajectory<T>>,
    /// `(pre, post)` states at every domain switch.
    pub resets: Vec<(State<T>, State<T>)>,
    pub apexes: Vec<ApexRecord<T>>,
}

impl<T: Real> HybridTrajectory<T> {
    pub fn empty() -> Self {
        Self { phases: Vec::new(), resets: Vec::new(), apexes: Vec::new() }
    }

    pub fn duration(&self) -> T {
        self.phases.last().map(|p| p.t_start + p.duration).unwrap_or_else(T::zero)
    }

    pub fn final_state(&self) -> Option<State<T>> {
        self.phases.last().map(|p| p.last().state)
    }

    /// Every recorded sample with its global time.
    pub fn samples(&self) -> impl Iterator<Item = (T, &Sample<T>)> + '_ {
        self.phases.iter().flat_map(|p| p.samples.iter().map(move |s| (p.t_start + s.t, s)))
    }

    /// State at global time `t` (the later phase wins at a boundary).
    pub fn state_at_time(&self, t: T) -> Option<State<T>> {
        let i = self.phases.partition_point(|p| p.t_start <= t).checked_sub(1)?;
        let phase = &self.phases[i];
        let local = t - phase.t_start;
        if local > phase.duration {
            return None;
        }
        phase.state_at(local)
    }

    /// Uniform resampling at spacing `dt` (plus every phase boundary), with
    /// actuator force and constraint forces recomputed at each point.
    pub fn resample<A: Actuation<T> + ?Sized>(
        &self,
        params: &ModelParams<T>,
        actuation: &A,
        dt: T,
    ) -> Result<Vec<(T, Sample<T>)>, SimError> {
        let mut out = Vec::new();
        for phase in &self.phases {
            let mut times = Vec::new();
            let mut t = T::zero();
            while t < phase.duration {
                times.push(t);
                t += dt;
            }
            times.push(phase.duration);
            for t in times {
                let state = phase.state_at(t).expect("time inside phase");
                let u = actuation.force(&state, phase.clock_start + t);
                let (_, forces) = constrained_dynamics(params, phase.domain, &state.q, &state.qdot, u)?;
                out.push((phase.t_start + t, Sample { t, state, u, forces: forces.as_slice().to_vec() }));
            }
        }
        Ok(out)
    }
}

/// When a hybrid simulation ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct StopCondition<T> {
    /// Stop at this flight apex (counted from the start, excluding it).
    pub max_hops: usize,
    /// Simulated-time horizon, s.
    pub t_max: T,
    /// Longest admissible continuous ground contact, s.
    pub max_ground_time: T,
}

impl<T: Real> Default for StopCondition<T> {
    fn default() -> Self {
        Self { max_hops: 20, t_max: T::lit(30.0), max_ground_time: T::lit(5.0) }
    }
}

impl<T: Real> StopCondition<T> {
    pub fn hops(n: usize) -> Self {
        Self { max_hops: n, ..Self::default() }
    }
}

/// Dormand–Prince 5(4) tableau.
struct Tableau<T> {
    c: [T; 7],
    a: [[T; 6]; 7],
    b: [T; 7],
    e: [T; 7],
    d: [T; 7],
}

impl<T: Real> Tableau<T> {
    fn new() -> Self {
        let l = T::lit;
        let z = T::zero();
        Self {
            c: [z, l(0.2), l(0.3), l(0.8), l(8.0 / 9.0), T::one(), T::one()],
            a: [
                [z; 6],
                [l(0.2), z, z, z, z, z],
                [l(3.0 / 40.0), l(9.0 / 40.0), z, z, z, z],
                [l(44.0 / 45.0), l(-56.0 / 15.0), l(32.0 / 9.0), z, z, z],
                [l(19372.0 / 6561.0), l(-25360.0 / 2187.0), l(64448.0 / 6561.0), l(-212.0 / 729.0), z, z],
                [
                    l(9017.0 / 3168.0),
                    l(-355.0 / 33.0),
                    l(46732.0 / 5247.0),
                    l(49.0 / 176.0),
                    l(-5103.0 / 18656.0),
                    z,
                ],
                [l(35.0 / 384.0), z, l(500.0 / 1113.0), l(125.0 / 192.0), l(-2187.0 / 6784.0), l(11.0 / 84.0)],
            ],
            b: [l(35.0 / 384.0), z, l(500.0 / 1113.0), l(125.0 / 192.0), l(-2187.0 / 6784.0), l(11.0 / 84.0), z],
            e: [
                l(71.0 / 57600.0),
                z,
                l(-71.0 / 16695.0),
                l(71.0 / 1920.0),
                l(-17253.0 / 339200.0),
                l(22.0 / 525.0),
                l(-1.0 / 40.0),
            ],
            d: [
                l(-12715105075.0 / 11282082432.0),
                z,
                l(87487479700.0 / 32700410799.0),
                l(-10690763975.0 / 1880347072.0),
                l(701980252875.0 / 199316789632.0),
                l(-1453857185.0 / 822651844.0),
                l(69997945.0 / 29380423.0),
            ],
        }
    }
}

struct Step<T: Real> {
    x: Vector6<T>,
    err: Vector6<T>,
    k: [Vector6<T>; 7],
}

/// Guard or apex bracket inside an accepted step.
#[derive(Clone, Copy)]
enum EventKind {
    Guard(GuardKind),
    Apex,
}

/// Integrates the hybrid model under an actuation policy.
pub struct Simulator<'a, T: Real, A: Actuation<T> + ?Sized> {
    pub params: &'a ModelParams<T>,
    pub graph: &'a HybridGraph,
    pub actuation: &'a A,
    pub config: IntegratorConfig<T>,
    tableau: Tableau<T>,
}

impl<'a, T: Real, A: Actuation<T> + ?Sized> Simulator<'a, T, A> {
    pub fn new(params: &'a ModelParams<T>, graph: &'a HybridGraph, actuation: &'a A) -> Self {
        Self::with_config(params, graph, actuation, IntegratorConfig::default())
    }

    pub fn with_config(
        params: &'a ModelParams<T>,
        graph: &'a HybridGraph,
        actuation: &'a A,
        config: IntegratorConfig<T>,
    ) -> Self {
        Self { params, graph, actuation, config, tableau: Tableau::new() }
    }

    fn state_of(&self, x: &Vector6<T>, domain: DomainId, t: T) -> State<T> {
        State { q: Vector3::new(x[0], x[1], x[2]), qdot: Vector3::new(x[3], x[4], x[5]), domain, t_local: t }
    }

    fn eval(&self, domain: DomainId, clock0: T, t: T, x: &Vector6<T>) -> Result<(Vector6<T>, T, ContactForces<T>), SimError> {
        let state = self.state_of(x, domain, t);
        let u = self.actuation.force(&state, clock0 + t);
        let (acc, forces) = constrained_dynamics(self.params, domain, &state.q, &state.qdot, u)?;
        let dx = Vector6::new(x[3], x[4], x[5], acc[0], acc[1], acc[2]);
        Ok((dx, u, forces))
    }

    fn sample(&self, domain: DomainId, clock0: T, t: T, x: &Vector6<T>) -> Result<Sample<T>, SimError> {
        let (_, u, forces) = self.eval(domain, clock0, t, x)?;
        Ok(Sample { t, state: self.state_of(x, domain, t), u, forces: forces.as_slice().to_vec() })
    }

    fn rk_step(&self, domain: DomainId, clock0: T, t: T, x: &Vector6<T>, k1: &Vector6<T>, h: T) -> Result<Step<T>, SimError> {
        let tb = &self.tableau;
        let mut k = [*k1; 7];
        for s in 1..7 {
            let mut xs = *x;
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = tb.a[s][j];
                if a != T::zero() {
                    xs += kj * (a * h);
                }
            }
            k[s] = self.eval(domain, clock0, t + tb.c[s] * h, &xs)?.0;
        }
        let mut x_new = *x;
        let mut err = Vector6::zeros();
        for s in 0..7 {
            if tb.b[s] != T::zero() {
                x_new += k[s] * (tb.b[s] * h);
            }
            if tb.e[s] != T::zero() {
                err += k[s] * (tb.e[s] * h);
            }
        }
        Ok(Step { x: x_new, err, k })
    }

    fn dense_step(&self, t0: T, h: T, x0: &Vector6<T>, step: &Step<T>) -> DenseStep<T> {
        let tb = &self.tableau;
        let ydiff = step.x - x0;
        let bspl = step.k[0] * h - ydiff;
        let mut r5 = Vector6::zeros();
        for s in 0..7 {
            if tb.d[s] != T::zero() {
                r5 += step.k[s] * (tb.d[s] * h);
            }
        }
        DenseStep { t0, h, coeffs: [*x0, ydiff, bspl, ydiff - step.k[6] * h - bspl, r5] }
    }

    fn event_value(&self, kind: EventKind, domain: DomainId, clock0: T, t: T, x: &Vector6<T>) -> Result<T, SimError> {
        match kind {
            EventKind::Apex => Ok(x[3]),
            EventKind::Guard(g) => {
                let state = self.state_of(x, domain, t);
                let u = self.actuation.force(&state, clock0 + t);
                Ok(g.value(self.params, &state, u)?)
            }
        }
    }

    fn event_scale(&self, kind: EventKind) -> T {
        match kind {
            EventKind::Apex => T::one(),
            EventKind::Guard(g) => g.scale(self.params),
        }
    }

    fn check_start(&self, state: &State<T>) -> Result<(), SimError> {
        let p = self.params;
        let mut residual = T::zero();
        for c in state.domain.contacts() {
            let row = c.row::<T>();
            let pos = match c {
                hybrid::ContactKind::Hardstop => state.q[1],
                hybrid::ContactKind::Ground => p.foot_height(state),
            };
            residual = residual.max((pos / p.rest_length).abs()).max(row.dot(&state.qdot).abs());
        }
        if residual > T::lit(1e-6) {
            return Err(SimError::InconsistentStart { domain: state.domain, residual: residual.to_f64_lossy() });
        }
        Ok(())
    }

    /// Locates the zero of an event inside `[ta, tb]` (offsets from `t`)
    /// using true Runge–Kutta steps from `x`. Returns the offset and state.
    #[allow(clippy::too_many_arguments)]
    fn locate(
        &self,
        kind: EventKind,
        domain: DomainId,
        clock0: T,
        t: T,
        x: &Vector6<T>,
        k1: &Vector6<T>,
        mut ta: T,
        mut tb: T,
        mut ga: T,
        mut gb: T,
    ) -> Result<(T, Vector6<T>), SimError> {
        let tol = self.config.event_tol * self.event_scale(kind);
        let state_at = |tau: T| -> Result<Vector6<T>, SimError> {
            if tau == T::zero() {
                Ok(*x)
            } else {
                Ok(self.rk_step(domain, clock0, t, x, k1, tau)?.x)
            }
        };
        let mut best = (tb, state_at(tb)?, gb.abs());
        if ga.abs() < best.2 {
            best = (ta, state_at(ta)?, ga.abs());
        }
        let mut side = 0i8;
        for _ in 0..200 {
            if best.2 < tol || (tb - ta) <= T::lit(4.0) * T::default_epsilon() * (t + tb).abs().max(T::one()) {
                break;
            }
            // Illinois-modified regula falsi, with a bisection guard.
            let mut tm = (ta * gb - tb * ga) / (gb - ga);
            if !(tm > ta && tm < tb) {
                tm = (ta + tb) * T::lit(0.5);
            }
            let xm = state_at(tm)?;
            let gm = self.event_value(kind, domain, clock0, t + tm, &xm)?;
            if gm.abs() < best.2 {
                best = (tm, xm, gm.abs());
            }
            if gm > T::zero() {
                ta = tm;
                ga = gm;
                if side == 1 {
                    gb *= T::lit(0.5);
                }
                side = 1;
            } else {
                tb = tm;
                gb = gm;
                if side == -1 {
                    ga *= T::lit(0.5);
                }
                side = -1;
            }
        }
        Ok((best.0, best.1))
    }

    /// Integrates the continuous dynamics of `state0.domain` until a guard
    /// fires, `t_max` elapses, or (with `stop_at_apex`) the first apex.
    pub fn integrate_domain(
        &self,
        state0: &State<T>,
        clock0: T,
        t_max: T,
        stop_at_apex: bool,
    ) -> Result<PhaseTrajectory<T>, SimError> {
        self.check_start(state0)?;
        let cfg = &self.config;
        let domain = state0.domain;
        let guards = self.graph.guards(domain);
        let mut kinds: Vec<EventKind> = guards.iter().map(|g| EventKind::Guard(*g)).collect();
        if domain.is_flight() {
            kinds.push(EventKind::Apex);
        }

        let mut x = Vector6::new(state0.q[0], state0.q[1], state0.q[2], state0.qdot[0], state0.qdot[1], state0.qdot[2]);
        let mut t = T::zero();
        let mut phase = PhaseTrajectory {
            domain,
            t_start: T::zero(),
            clock_start: clock0,
            samples: vec![self.sample(domain, clock0, t, &x)?],
            exit_event: None,
            duration: T::zero(),
            apexes: Vec::new(),
            dense: Vec::new(),
        };
        let mut g_prev: Vec<T> = kinds.iter().map(|k| self.event_value(*k, domain, clock0, t, &x)).collect::<Result<_, _>>()?;
        let g_start = g_prev.clone();
        let mut k1 = self.eval(domain, clock0, t, &x)?.0;
        let mut h = cfg.fixed_step.unwrap_or(cfg.h_init).min(cfg.h_max);
        let mut steps = 0usize;
        let mut first = true;

        while t < t_max {
            steps += 1;
            if steps > cfg.max_steps {
                return Err(SimError::MaxSteps(domain));
            }
            let h_try = h.min(t_max - t);
            let step = self.rk_step(domain, clock0, t, &x, &k1, h_try)?;
            let mut factor = T::lit(5.0);
            if cfg.fixed_step.is_none() {
                let mut err = T::zero();
                for i in 0..6 {
                    let sc = cfg.atol + cfg.rtol * x[i].abs().max(step.x[i].abs());
                    err = err.max((step.err[i] / sc).abs());
                }
                if !err.is_finite() || err > T::one() {
                    let shrink = if err.is_finite() { (T::lit(0.9) * err.powf(T::lit(-0.2))).max(T::lit(0.2)) } else { T::lit(0.2) };
                    h = h_try * shrink;
                    if h < cfg.h_min {
                        return Err(SimError::StepFailure { domain, t: t.to_f64_lossy() });
                    }
                    continue;
                }
                if err > T::zero() {
                    factor = (T::lit(0.9) * err.powf(T::lit(-0.2))).min(T::lit(5.0)).max(T::lit(0.2));
                }
            }
            let dense = self.dense_step(t, h_try, &x, &step);

            // Bracket events on the dense output.
            let thetas = [T::lit(0.25), T::lit(0.5), T::lit(0.75), T::one()];
            let mut hits: Vec<(usize, T, T, T, T)> = Vec::new();
            let mut g_end = g_prev.clone();
            for (ki, kind) in kinds.iter().enumerate() {
                let mut ga = g_prev[ki];
                let mut ta = T::zero();
                g_end[ki] = self.event_value(*kind, domain, clock0, t + h_try, &step.x)?;
                for (ti, &th) in thetas.iter().enumerate() {
                    let tau = h_try * th;
                    let gb = if ti == 3 { g_end[ki] } else { self.event_value(*kind, domain, clock0, t + tau, &dense.eval(th))? };
                    let fires = if ga > T::zero() {
                        gb <= T::zero()
                    } else {
                        // A phase can start on the guard surface; it fires
                        // immediately only if the value moves to the wrong side.
                        first
                            && ta == T::zero()
                            && matches!(kind, EventKind::Guard(_))
                            && g_start[ki] <= self.config.event_tol * self.event_scale(*kind)
                            && gb < g_start[ki]
                            && gb < T::zero()
                    };
                    if fires {
                        if ga <= T::zero() {
                            // Immediate exit at the start of the phase.
                            hits.push((ki, T::zero(), T::zero(), T::zero(), T::zero()));
                        } else {
                            hits.push((ki, ta, tau, ga, gb));
                        }
                        break;
                    }
                    ga = gb;
                    ta = tau;
                }
            }

            let mut located: Vec<(usize, T, Vector6<T>)> = Vec::new();
            for &(ki, ta, tb, ga, gb) in &hits {
                if tb == T::zero() {
                    located.push((ki, T::zero(), x));
                } else {
                    let (tau, xe) = self.locate(kinds[ki], domain, clock0, t, &x, &k1, ta, tb, ga, gb)?;
                    located.push((ki, tau, xe));
                }
            }
            located.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));

            // Record apexes passed before the first guard.
            let first_guard = located.iter().find(|l| matches!(kinds[l.0], EventKind::Guard(_)));
            let guard_time = first_guard.map(|l| l.1);
            for l in located.iter().filter(|l| matches!(kinds[l.0], EventKind::Apex)) {
                if guard_time.is_some_and(|tg| tg <= l.1) {
                    continue;
                }
                let s = self.sample(domain, clock0, t + l.1, &l.2)?;
                phase.apexes.push(s.clone());
                if stop_at_apex {
                    // The interpolant stays that of the full step; `duration`
                    // bounds its use.
                    if l.1 > T::zero() {
                        phase.dense.push(dense.clone());
                    }
                    phase.samples.push(s);
                    phase.duration = t + l.1;
                    return Ok(phase);
                }
            }

            if let Some(&(ki, tau, xe)) = first_guard {
                let EventKind::Guard(guard) = kinds[ki] else { unreachable!() };
                // A second, different guard at the same instant is ambiguous.
                let time_tol = T::lit(1e-10);
                if let Some(other) = located
                    .iter()
                    .find(|l| l.0 != ki && matches!(kinds[l.0], EventKind::Guard(_)) && (l.1 - tau).abs() <= time_tol)
                {
                    let EventKind::Guard(second) = kinds[other.0] else { unreachable!() };
                    return Err(HybridError::AmbiguousEvent { domain, first: guard, second }.into());
                }
                let te = t + tau;
                let s = self.sample(domain, clock0, te, &xe)?;
                let target = self.graph.target(domain, guard, s.u).ok_or(SimError::NoEdge { domain, guard })?;
                if tau > T::zero() {
                    phase.dense.push(dense);
                    phase.samples.push(s);
                } else if phase.samples.len() > 1 || t > T::zero() {
                    phase.samples.push(s);
                }
                phase.duration = te;
                phase.exit_event = Some((guard, target));
                return Ok(phase);
            }

            t += h_try;
            x = step.x;
            k1 = step.k[6];
            g_prev = g_end;
            first = false;
            phase.dense.push(dense);
            phase.samples.push(self.sample(domain, clock0, t, &x)?);
            let norm = x.amax();
            if !norm.is_finite() || norm > cfg.state_bound {
                return Err(SimError::SimulationDiverged { t: t.to_f64_lossy(), norm: norm.to_f64_lossy() });
            }
            h = match cfg.fixed_step {
                Some(hf) => hf,
                None => (h_try * factor).min(cfg.h_max).max(cfg.h_min),
            };
        }
        phase.duration = t;
        Ok(phase)
    }

    /// Chains domain integrations through guards and resets until `stop`.
    /// Policy time starts at `clock0` and restarts at the policy's reset
    /// event.
    pub fn simulate_hybrid(
        &self,
        state0: &State<T>,
        clock0: T,
        stop: &StopCondition<T>,
    ) -> Result<HybridTrajectory<T>, SimError> {
        let mut traj = HybridTrajectory::empty();
        if stop.max_hops == 0 {
            return Ok(traj);
        }
        let mut state = *state0;
        state.t_local = T::zero();
        let mut clock = clock0;
        let mut t_global = T::zero();
        let mut hops = 0usize;
        let mut instant = 0usize;
        loop {
            let remaining = stop.t_max - t_global;
            if remaining <= T::zero() {
                break;
            }
            let horizon = if state.domain.has_ground_contact() { remaining.min(stop.max_ground_time) } else { remaining };
            let mut phase = self.integrate_domain(&state, clock, horizon, hops + 1 == stop.max_hops)?;
            phase.t_start = t_global;
            for apex in &phase.apexes {
                traj.apexes.push(ApexRecord { t: t_global + apex.t, state: apex.state });
            }
            hops += phase.apexes.len();
            t_global += phase.duration;
            clock += phase.duration;
            instant = if phase.duration == T::zero() { instant + 1 } else { 0 };
            if instant > self.config.max_instant_phases {
                return Err(SimError::Zeno(self.config.max_instant_phases));
            }
            let exit = phase.exit_event;
            let pre = phase.last().state;
            traj.phases.push(phase);
            if hops >= stop.max_hops {
                break;
            }
            let Some((guard, target)) = exit else {
                if state.domain.has_ground_contact() && horizon < remaining {
                    return Err(SimError::NoLiftoff(stop.max_ground_time.to_f64_lossy()));
                }
                break;
            };
            let post = hybrid::apply_reset(self.params, &pre, target)?;
            traj.resets.push((pre, post));
            if self.actuation.clock_reset() == Some(guard) {
                clock = T::zero();
            }
            state = post;
        }
        Ok(traj)
    }
}
