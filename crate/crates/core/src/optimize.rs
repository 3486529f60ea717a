//! Minimum-effort periodic hops by direct collocation.
//!
//! One hop is unrolled from a flight apex: the flight domain is split at the
//! apex into a descent segment and an ascent segment, with the contact
//! domains in between. Each segment carries `knots_per_phase` knots of state
//! and actuator force plus a free duration. Defects use compressed
//! Hermite–Simpson collocation with first-order-hold control.
//!
//! Within a domain the constrained dynamics are affine in the state and the
//! force, so every constraint is bilinear in (duration, knot values) and all
//! derivatives below are exact.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, RowVector6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{Actuation, ControlError, ControlPolicy, ControlSignal, Passive};
use crate::hybrid::{self, ContactKind, DomainId, GuardKind, HybridError, HybridGraph};
use crate::integrate::{HybridTrajectory, IntegratorConfig, SimError, Simulator, StopCondition};
use crate::model::{ModelParams, State, Variant};
use crate::nlp::{self, NlpOptions, NlpProblem, NlpStatus};

type Params = ModelParams<f64>;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("phase sequence {0:?} is not a cycle of the selected hybrid graph")]
    InfeasibleStructure(Vec<DomainId>),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("warm start is incompatible: {0}")]
    WarmStartMismatch(String),
    #[error("solver stopped with {status:?} (constraint violation {violation:e})")]
    NotConverged { status: NlpStatus, violation: f64 },
    #[error(transparent)]
    Hybrid(#[from] HybridError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

/// One periodic hop to optimize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopProblem {
    pub params: Params,
    /// Foot clearance at the apex, m.
    pub clearance: f64,
    /// Cyclic domain sequence, e.g. `[D1, D3, D4]`.
    pub phase_sequence: Vec<DomainId>,
    pub knots_per_phase: usize,
    /// Domains in which the actuator may act.
    pub control_scope: Vec<DomainId>,
    pub solver: NlpOptions,
}

impl HopProblem {
    pub fn new(params: Params, clearance: f64) -> Self {
        let (sequence, scope) = match params.variant {
            Variant::DoubleSpring => (vec![DomainId::D1, DomainId::D3, DomainId::D4], vec![DomainId::D3]),
            Variant::SingleSpring => (vec![DomainId::Flight, DomainId::Ground], vec![DomainId::Ground]),
        };
        Self {
            params,
            clearance,
            phase_sequence: sequence,
            knots_per_phase: 80,
            control_scope: scope,
            solver: NlpOptions::default(),
        }
    }

    pub fn with_knots(mut self, knots: usize) -> Self {
        self.knots_per_phase = knots;
        self
    }
}

/// Reference scale of the objective, s.
const TIME_REF: f64 = 0.1;
const MIN_DURATION: f64 = 1e-3;
const MAX_DURATION: f64 = 2.0;

/// Affine flow `xdot = A x + b v + e` in one domain, with `v = u / u_max`,
/// and the affine contact forces.
#[derive(Debug, Clone)]
struct AffineDomain {
    a: Matrix6<f64>,
    b: Vector6<f64>,
    e: Vector6<f64>,
    a2: Matrix6<f64>,
    ab: Vector6<f64>,
    /// Ground force `fx·x + fv v + f0` for contact domains.
    ground: Option<(RowVector6<f64>, f64, f64)>,
}

fn flow(params: &Params, domain: DomainId, x: &Vector6<f64>, u: f64) -> Result<(Vector6<f64>, Option<f64>), HybridError> {
    let q = Vector3::new(x[0], x[1], x[2]);
    let qd = Vector3::new(x[3], x[4], x[5]);
    let (acc, forces) = hybrid::constrained_dynamics(params, domain, &q, &qd, u)?;
    Ok((Vector6::new(x[3], x[4], x[5], acc[0], acc[1], acc[2]), forces.get(ContactKind::Ground)))
}

impl AffineDomain {
    fn new(params: &Params, domain: DomainId) -> Result<Self, HybridError> {
        let (e, g0) = flow(params, domain, &Vector6::zeros(), 0.0)?;
        let mut a = Matrix6::zeros();
        let mut gx = RowVector6::zeros();
        for j in 0..6 {
            let (f, g) = flow(params, domain, &Vector6::ith(j, 1.0), 0.0)?;
            a.set_column(j, &(f - e));
            if let (Some(g), Some(g0)) = (g, g0) {
                gx[j] = g - g0;
            }
        }
        let (fu, gu) = flow(params, domain, &Vector6::zeros(), params.force_limit)?;
        let b = fu - e;
        let ground = g0.map(|g0| (gx, gu.unwrap_or(g0) - g0, g0));
        Ok(Self { a2: a * a, ab: a * b, a, b, e, ground })
    }
}

/// Velocity reset into `domain` as a matrix, built from the shared reset map.
fn reset_matrix(params: &Params, domain: DomainId) -> Result<Matrix3<f64>, HybridError> {
    let mut p = Matrix3::zeros();
    for j in 0..3 {
        let pre = State::new(Vector3::zeros(), Vector3::ith(j, 1.0), domain);
        let post = hybrid::apply_reset(params, &pre, domain)?;
        p.set_column(j, &post.qdot);
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub domain: DomainId,
    pub controlled: bool,
    /// Guard ending the segment (none for the final ascent to the apex).
    pub exit: Option<GuardKind>,
    /// Whether `y` is a free coordinate inside the segment.
    pub mover_free: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowKind {
    Defect,
    Junction,
    Guard,
    Periodic,
    Apex,
    FootClearance,
    GroundForce,
}

/// The transcribed nonlinear program over the full decision vector.
///
/// Layout: for each segment and knot, six state values then `u / u_max`;
/// the segment durations follow. Actuator knots outside the control scope are
/// fixed at zero (equal bounds); [`solve_hop`] removes them before solving.
#[derive(Debug, Clone)]
pub struct Transcription {
    pub params: Params,
    pub clearance: f64,
    pub knots: usize,
    pub segments: Vec<SegmentInfo>,
    /// Normalized knot positions in `[0, 1]`.
    pub mesh: Vec<f64>,
    models: Vec<AffineDomain>,
    /// Velocity reset applied entering segment `s + 1`.
    resets: Vec<Matrix3<f64>>,
    rows: Vec<RowKind>,
    /// `(row, segment, knot)` for inequality rows.
    ineq_rows: Vec<(usize, usize, usize)>,
    force_scale: f64,
}

impl Transcription {
    pub fn new(problem: &HopProblem) -> Result<Self, OptimizeError> {
        let p = &problem.params;
        p.validate().map_err(|e| OptimizeError::InvalidProblem(e.to_string()))?;
        if !(problem.clearance > 0.0) {
            return Err(OptimizeError::InvalidProblem(format!("clearance must be positive, got {}", problem.clearance)));
        }
        if problem.knots_per_phase < 3 {
            return Err(OptimizeError::InvalidProblem("at least 3 knots per phase are required".into()));
        }
        let graph = HybridGraph::selected_cycle(p.variant);
        let seq = &problem.phase_sequence;
        let flights: Vec<usize> = (0..seq.len()).filter(|&i| seq[i].is_flight()).collect();
        if !graph.is_cycle(seq) || flights.len() != 1 {
            return Err(OptimizeError::InfeasibleStructure(seq.clone()));
        }
        let start = flights[0];
        let mut domains: Vec<DomainId> = (0..seq.len()).map(|i| seq[(start + i) % seq.len()]).collect();
        domains.push(domains[0]);

        let mut segments = Vec::new();
        for (i, &d) in domains.iter().enumerate() {
            let exit = domains.get(i + 1).map(|&next| {
                graph
                    .exits(d)
                    .find(|e| e.to == next)
                    .map(|e| e.guard)
                    .expect("cycle edges exist")
            });
            segments.push(SegmentInfo {
                domain: d,
                controlled: problem.control_scope.contains(&d),
                exit,
                mover_free: d.mover_free(),
            });
        }
        let models = segments.iter().map(|s| AffineDomain::new(p, s.domain)).collect::<Result<Vec<_>, _>>()?;
        let resets = segments[1..].iter().map(|s| reset_matrix(p, s.domain)).collect::<Result<Vec<_>, _>>()?;
        let k = problem.knots_per_phase;
        let mesh = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();

        let mut tr = Self {
            params: *p,
            clearance: problem.clearance,
            knots: k,
            segments,
            mesh,
            models,
            resets,
            rows: Vec::new(),
            ineq_rows: Vec::new(),
            force_scale: 1.0 / (p.total_mass * p.gravity),
        };
        tr.build_rows();
        Ok(tr)
    }

    fn build_rows(&mut self) {
        let ns = self.segments.len();
        let mut rows = Vec::new();
        for s in 0..ns {
            rows.extend(std::iter::repeat_n(RowKind::Defect, 6 * (self.knots - 1)));
            if s + 1 < ns {
                rows.extend(std::iter::repeat_n(RowKind::Junction, 6));
                rows.push(RowKind::Guard);
            }
        }
        rows.extend(std::iter::repeat_n(RowKind::Periodic, 6));
        rows.extend([RowKind::Apex, RowKind::Apex]);
        let mut ineq = Vec::new();
        for (s, seg) in self.segments.iter().enumerate() {
            for k in 0..self.knots {
                let last = k + 1 == self.knots;
                if seg.domain.is_flight() {
                    if k > 0 && !last {
                        ineq.push((rows.len(), s, k));
                        rows.push(RowKind::FootClearance);
                    }
                } else if !(last && seg.exit == Some(GuardKind::Liftoff)) {
                    ineq.push((rows.len(), s, k));
                    rows.push(RowKind::GroundForce);
                }
            }
        }
        self.rows = rows;
        self.ineq_rows = ineq;
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    /// Length of the full decision vector.
    pub fn num_decision_variables(&self) -> usize {
        self.segments.len() * (self.knots * 7 + 1)
    }

    fn knot_index(&self, s: usize, k: usize) -> usize {
        (s * self.knots + k) * 7
    }

    fn duration_index(&self, s: usize) -> usize {
        self.segments.len() * self.knots * 7 + s
    }

    fn state(&self, x: &DVector<f64>, s: usize, k: usize) -> Vector6<f64> {
        let i = self.knot_index(s, k);
        Vector6::from_iterator(x.rows(i, 6).iter().copied())
    }

    fn control(&self, x: &DVector<f64>, s: usize, k: usize) -> f64 {
        x[self.knot_index(s, k) + 6]
    }

    pub fn durations(&self, x: &DVector<f64>) -> Vec<f64> {
        (0..self.segments.len()).map(|s| x[self.duration_index(s)]).collect()
    }

    /// Indices of decision variables that are not fixed.
    pub fn free_variables(&self) -> Vec<usize> {
        (0..self.num_decision_variables())
            .filter(|&i| {
                if i >= self.segments.len() * self.knots * 7 {
                    return true;
                }
                let s = i / (self.knots * 7);
                i % 7 != 6 || self.segments[s].controlled
            })
            .collect()
    }

    fn y_bounded(&self, s: usize, k: usize) -> bool {
        let seg = &self.segments[s];
        if !seg.mover_free {
            return false;
        }
        if self.params.variant == Variant::SingleSpring {
            return true;
        }
        let entered_locked = s > 0 && self.segments[s - 1].domain.has_hardstop();
        let exits_on_stop = seg.exit == Some(GuardKind::HardstopImpact);
        !(k == 0 && entered_locked) && !(k + 1 == self.knots && exits_on_stop)
    }

    fn defect_row0(&self, s: usize) -> usize {
        s * (6 * (self.knots - 1) + 7)
    }

    fn interval(&self, x: &DVector<f64>, s: usize, k: usize) -> (Vector6<f64>, f64, Vector6<f64>, f64, f64, f64) {
        let w = self.mesh[k + 1] - self.mesh[k];
        (self.state(x, s, k), self.control(x, s, k), self.state(x, s, k + 1), self.control(x, s, k + 1), w, x[self.duration_index(s)])
    }

    /// Collocation defect of one interval.
    fn defect(&self, s: usize, x0: &Vector6<f64>, v0: f64, x1: &Vector6<f64>, v1: f64, h: f64) -> Vector6<f64> {
        let m = &self.models[s];
        let sum = m.a * (x0 + x1) + m.b * (v0 + v1) + m.e * 2.0;
        let kk = m.a2 * (x0 - x1) + m.ab * (v0 - v1);
        x1 - x0 - sum * (h / 2.0) - kk * (h * h / 12.0)
    }

    fn ground_force_at(&self, s: usize, xk: &Vector6<f64>, vk: f64) -> f64 {
        match &self.models[s].ground {
            Some((gx, gv, g0)) => gx.dot(&xk.transpose()) + gv * vk + g0,
            None => 0.0,
        }
    }

    fn guard_value(&self, s: usize, xk: &Vector6<f64>, vk: f64) -> f64 {
        match self.segments[s].exit {
            Some(GuardKind::Touchdown) => xk[0] + xk[2] - self.params.rest_length,
            Some(GuardKind::HardstopImpact) => xk[1],
            Some(GuardKind::Liftoff) => self.ground_force_at(s, xk, vk) * self.force_scale,
            Some(GuardKind::HardstopRelease) | None => 0.0,
        }
    }

    fn guard_gradient(&self, s: usize) -> (RowVector6<f64>, f64) {
        match self.segments[s].exit {
            Some(GuardKind::Touchdown) => (RowVector6::new(1.0, 0.0, 1.0, 0.0, 0.0, 0.0), 0.0),
            Some(GuardKind::HardstopImpact) => (RowVector6::new(0.0, 1.0, 0.0, 0.0, 0.0, 0.0), 0.0),
            Some(GuardKind::Liftoff) => {
                let (gx, gv, _) = self.models[s].ground.expect("liftoff from a contact domain");
                (gx * self.force_scale, gv * self.force_scale)
            }
            _ => (RowVector6::zeros(), 0.0),
        }
    }

    fn reset_full(&self, s: usize) -> Matrix6<f64> {
        let mut r = Matrix6::identity();
        r.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.resets[s]);
        r
    }

    /// Constraint values; see [`Transcription::constraint_bounds`].
    pub fn constraint_values(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut c = DVector::zeros(self.rows.len());
        let ns = self.segments.len();
        let last = self.knots - 1;
        for s in 0..ns {
            let r0 = self.defect_row0(s);
            for k in 0..last {
                let (x0, v0, x1, v1, w, t) = self.interval(x, s, k);
                c.rows_mut(r0 + 6 * k, 6).copy_from(&self.defect(s, &x0, v0, &x1, v1, w * t));
            }
            if s + 1 < ns {
                let rj = r0 + 6 * last;
                let pre = self.state(x, s, last);
                let post = self.state(x, s + 1, 0);
                c.rows_mut(rj, 6).copy_from(&(post - self.reset_full(s) * pre));
                c[rj + 6] = self.guard_value(s, &pre, self.control(x, s, last));
            }
        }
        let rp = self.defect_row0(ns - 1) + 6 * last;
        let apex = self.state(x, 0, 0);
        c.rows_mut(rp, 6).copy_from(&(apex - self.state(x, ns - 1, last)));
        c[rp + 6] = apex[3];
        c[rp + 7] = apex[0] + apex[2] - self.params.rest_length;
        for &(row, s, k) in &self.ineq_rows {
            let xk = self.state(x, s, k);
            c[row] = match self.rows[row] {
                RowKind::FootClearance => xk[0] + xk[2] - self.params.rest_length,
                _ => self.ground_force_at(s, &xk, self.control(x, s, k)) * self.force_scale,
            };
        }
        c
    }

    pub fn constraint_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let m = self.rows.len();
        let mut lo = DVector::zeros(m);
        let mut hi = DVector::zeros(m);
        for (i, kind) in self.rows.iter().enumerate() {
            match kind {
                RowKind::FootClearance | RowKind::GroundForce => hi[i] = f64::INFINITY,
                _ => {}
            }
        }
        let apex_row = self.rows.iter().rposition(|r| *r == RowKind::Apex).expect("apex rows");
        lo[apex_row] = self.clearance;
        hi[apex_row] = self.clearance;
        (lo, hi)
    }

    pub fn variable_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.num_decision_variables();
        let mut lo = DVector::from_element(n, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(n, f64::INFINITY);
        for s in 0..self.segments.len() {
            for k in 0..self.knots {
                let i = self.knot_index(s, k);
                if self.segments[s].controlled {
                    lo[i + 6] = -1.0;
                    hi[i + 6] = 1.0;
                } else {
                    lo[i + 6] = 0.0;
                    hi[i + 6] = 0.0;
                }
                if self.y_bounded(s, k) {
                    lo[i + 1] = 0.0;
                    hi[i + 1] = self.params.mover_travel;
                }
            }
            let d = self.duration_index(s);
            lo[d] = MIN_DURATION;
            hi[d] = MAX_DURATION;
        }
        (lo, hi)
    }

    /// `∫u² dt` over the controlled segments, N²·s.
    pub fn effort(&self, x: &DVector<f64>) -> f64 {
        self.objective_value(x) * TIME_REF * self.params.force_limit.powi(2)
    }

    fn objective_value(&self, x: &DVector<f64>) -> f64 {
        let mut f = 0.0;
        for (s, seg) in self.segments.iter().enumerate() {
            if !seg.controlled {
                continue;
            }
            for k in 0..self.knots - 1 {
                let (_, v0, _, v1, w, t) = self.interval(x, s, k);
                f += w * t * (v0 * v0 + v0 * v1 + v1 * v1) / (3.0 * TIME_REF);
            }
        }
        f
    }

    fn objective_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.num_decision_variables());
        for (s, seg) in self.segments.iter().enumerate() {
            if !seg.controlled {
                continue;
            }
            let di = self.duration_index(s);
            for k in 0..self.knots - 1 {
                let (_, v0, _, v1, w, t) = self.interval(x, s, k);
                let c = w / (3.0 * TIME_REF);
                g[self.knot_index(s, k) + 6] += c * t * (2.0 * v0 + v1);
                g[self.knot_index(s, k + 1) + 6] += c * t * (v0 + 2.0 * v1);
                g[di] += c * (v0 * v0 + v0 * v1 + v1 * v1);
            }
        }
        g
    }

    pub fn constraint_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.num_decision_variables();
        let mut j = DMatrix::zeros(self.rows.len(), n);
        let ns = self.segments.len();
        let last = self.knots - 1;
        let eye = Matrix6::<f64>::identity();
        for s in 0..ns {
            let m = &self.models[s];
            let r0 = self.defect_row0(s);
            let di = self.duration_index(s);
            for k in 0..last {
                let (x0, v0, x1, v1, w, t) = self.interval(x, s, k);
                let h = w * t;
                let r = r0 + 6 * k;
                let c0 = self.knot_index(s, k);
                let c1 = self.knot_index(s, k + 1);
                let dx0 = -eye - m.a * (h / 2.0) - m.a2 * (h * h / 12.0);
                let dx1 = eye - m.a * (h / 2.0) + m.a2 * (h * h / 12.0);
                let dv0 = -m.b * (h / 2.0) - m.ab * (h * h / 12.0);
                let dv1 = -m.b * (h / 2.0) + m.ab * (h * h / 12.0);
                let sum = m.a * (x0 + x1) + m.b * (v0 + v1) + m.e * 2.0;
                let kk = m.a2 * (x0 - x1) + m.ab * (v0 - v1);
                let dt = (-sum / 2.0 - kk * (h / 6.0)) * w;
                j.view_mut((r, c0), (6, 6)).copy_from(&dx0);
                j.view_mut((r, c0 + 6), (6, 1)).copy_from(&dv0);
                j.view_mut((r, c1), (6, 6)).copy_from(&dx1);
                j.view_mut((r, c1 + 6), (6, 1)).copy_from(&dv1);
                j.view_mut((r, di), (6, 1)).copy_from(&dt);
            }
            if s + 1 < ns {
                let rj = r0 + 6 * last;
                j.view_mut((rj, self.knot_index(s + 1, 0)), (6, 6)).copy_from(&eye);
                j.view_mut((rj, self.knot_index(s, last)), (6, 6)).copy_from(&(-self.reset_full(s)));
                let (gx, gv) = self.guard_gradient(s);
                let cl = self.knot_index(s, last);
                j.view_mut((rj + 6, cl), (1, 6)).copy_from(&gx);
                j[(rj + 6, cl + 6)] = gv;
            }
        }
        let rp = self.defect_row0(ns - 1) + 6 * last;
        let a0 = self.knot_index(0, 0);
        j.view_mut((rp, a0), (6, 6)).copy_from(&eye);
        j.view_mut((rp, self.knot_index(ns - 1, last)), (6, 6)).copy_from(&(-eye));
        j[(rp + 6, a0 + 3)] = 1.0;
        j[(rp + 7, a0)] = 1.0;
        j[(rp + 7, a0 + 2)] = 1.0;
        for &(row, s, k) in &self.ineq_rows {
            let ck = self.knot_index(s, k);
            match self.rows[row] {
                RowKind::FootClearance => {
                    j[(row, ck)] = 1.0;
                    j[(row, ck + 2)] = 1.0;
                }
                _ => {
                    let (gx, gv, _) = self.models[s].ground.expect("contact domain");
                    j.view_mut((row, ck), (1, 6)).copy_from(&(gx * self.force_scale));
                    j[(row, ck + 6)] = gv * self.force_scale;
                }
            }
        }
        j
    }

    pub fn lagrangian_hessian(&self, x: &DVector<f64>, sigma: f64, lambda: &DVector<f64>) -> DMatrix<f64> {
        let n = self.num_decision_variables();
        let mut hm = DMatrix::zeros(n, n);
        let last = self.knots - 1;
        for (s, seg) in self.segments.iter().enumerate() {
            let m = &self.models[s];
            let di = self.duration_index(s);
            let r0 = self.defect_row0(s);
            for k in 0..last {
                let (x0, v0, x1, v1, w, t) = self.interval(x, s, k);
                let h = w * t;
                let lam = lambda.fixed_rows::<6>(r0 + 6 * k).into_owned();
                let c0 = self.knot_index(s, k);
                let c1 = self.knot_index(s, k + 1);
                let kk = m.a2 * (x0 - x1) + m.ab * (v0 - v1);
                hm[(di, di)] += w * w * lam.dot(&(-kk / 6.0));
                let lx0 = (m.a * -0.5 - m.a2 * (h / 6.0)).tr_mul(&lam) * w;
                let lx1 = (m.a * -0.5 + m.a2 * (h / 6.0)).tr_mul(&lam) * w;
                let lv0 = lam.dot(&(m.b * -0.5 - m.ab * (h / 6.0))) * w;
                let lv1 = lam.dot(&(m.b * -0.5 + m.ab * (h / 6.0))) * w;
                for i in 0..6 {
                    hm[(di, c0 + i)] += lx0[i];
                    hm[(di, c1 + i)] += lx1[i];
                }
                hm[(di, c0 + 6)] += lv0;
                hm[(di, c1 + 6)] += lv1;
                if seg.controlled && sigma != 0.0 {
                    let c = sigma * w / (3.0 * TIME_REF);
                    hm[(c0 + 6, c0 + 6)] += 2.0 * c * t;
                    hm[(c1 + 6, c1 + 6)] += 2.0 * c * t;
                    hm[(c0 + 6, c1 + 6)] += c * t;
                    hm[(c1 + 6, c0 + 6)] += c * t;
                    hm[(di, c0 + 6)] += c * (2.0 * v0 + v1);
                    hm[(di, c1 + 6)] += c * (v0 + 2.0 * v1);
                }
            }
            // Mirror the duration row into its column.
            for i in 0..n {
                if i != di {
                    let v = hm[(di, i)];
                    hm[(i, di)] = v;
                }
            }
        }
        hm
    }

    /// Largest equality residual by group.
    pub fn residuals(&self, x: &DVector<f64>) -> Residuals {
        let c = self.constraint_values(x);
        let (lo, hi) = self.constraint_bounds();
        let mut r = Residuals::default();
        for (i, kind) in self.rows.iter().enumerate() {
            let v = (lo[i] - c[i]).max(c[i] - hi[i]).max(0.0);
            let slot = match kind {
                RowKind::Defect => &mut r.defect,
                RowKind::Junction => &mut r.junction,
                RowKind::Guard => &mut r.guard,
                RowKind::Periodic => &mut r.periodicity,
                RowKind::Apex => &mut r.apex,
                RowKind::FootClearance | RowKind::GroundForce => &mut r.admissibility,
            };
            *slot = slot.max(v);
        }
        let (xl, xu) = self.variable_bounds();
        for i in 0..x.len() {
            r.bounds = r.bounds.max(xl[i] - x[i]).max(x[i] - xu[i]);
        }
        r
    }

    /// Samples a simulated hop (apex to apex, phases matching the segments)
    /// at the knot positions.
    pub fn pack_trajectory<A: Actuation<f64> + ?Sized>(
        &self,
        traj: &HybridTrajectory<f64>,
        actuation: &A,
    ) -> Result<DVector<f64>, OptimizeError> {
        let doms: Vec<DomainId> = traj.phases.iter().map(|p| p.domain).collect();
        let want: Vec<DomainId> = self.segments.iter().map(|s| s.domain).collect();
        if doms != want {
            return Err(OptimizeError::WarmStartMismatch(format!("trajectory visits {doms:?}, expected {want:?}")));
        }
        let mut x = DVector::zeros(self.num_decision_variables());
        for (s, phase) in traj.phases.iter().enumerate() {
            for k in 0..self.knots {
                let t = self.mesh[k] * phase.duration;
                let st = phase.state_at(t).expect("inside phase");
                let i = self.knot_index(s, k);
                x.rows_mut(i, 3).copy_from(&st.q);
                x.rows_mut(i + 3, 3).copy_from(&st.qdot);
                x[i + 6] = if self.segments[s].controlled {
                    actuation.force(&st, phase.clock_start + t) / self.params.force_limit
                } else {
                    0.0
                };
            }
            x[self.duration_index(s)] = phase.duration;
        }
        Ok(x)
    }

    /// Per-segment knots of a decision vector.
    pub fn unpack(&self, x: &DVector<f64>) -> Vec<SegmentKnots> {
        self.segments
            .iter()
            .enumerate()
            .map(|(s, seg)| {
                let duration = x[self.duration_index(s)];
                SegmentKnots {
                    domain: seg.domain,
                    duration,
                    times: self.mesh.iter().map(|m| m * duration).collect(),
                    states: (0..self.knots).map(|k| self.state(x, s, k).into()).collect(),
                    forces: (0..self.knots).map(|k| self.control(x, s, k) * self.params.force_limit).collect(),
                }
            })
            .collect()
    }

    /// Inverse of [`Transcription::unpack`].
    pub fn pack(&self, knots: &[SegmentKnots]) -> Result<DVector<f64>, OptimizeError> {
        if knots.len() != self.segments.len() || knots.iter().any(|k| k.states.len() != self.knots) {
            return Err(OptimizeError::WarmStartMismatch(format!(
                "expected {} segments of {} knots",
                self.segments.len(),
                self.knots
            )));
        }
        let mut x = DVector::zeros(self.num_decision_variables());
        for (s, seg) in knots.iter().enumerate() {
            if seg.domain != self.segments[s].domain {
                return Err(OptimizeError::WarmStartMismatch(format!("segment {s} is {}", seg.domain)));
            }
            for k in 0..self.knots {
                let i = self.knot_index(s, k);
                for (j, v) in seg.states[k].iter().enumerate() {
                    x[i + j] = *v;
                }
                x[i + 6] = seg.forces[k] / self.params.force_limit;
            }
            x[self.duration_index(s)] = seg.duration;
        }
        Ok(x)
    }
}

impl NlpProblem for Transcription {
    fn num_variables(&self) -> usize {
        self.num_decision_variables()
    }
    fn num_constraints(&self) -> usize {
        self.rows.len()
    }
    fn variable_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        Transcription::variable_bounds(self)
    }
    fn constraint_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        Transcription::constraint_bounds(self)
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        self.objective_value(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.objective_gradient(x)
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        self.constraint_values(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.constraint_jacobian(x)
    }
    fn hessian(&self, x: &DVector<f64>, sigma: f64, lambda: &DVector<f64>) -> DMatrix<f64> {
        self.lagrangian_hessian(x, sigma, lambda)
    }
}

/// The transcription restricted to its free variables.
struct Reduced<'a> {
    tr: &'a Transcription,
    free: Vec<usize>,
    base: DVector<f64>,
}

impl Reduced<'_> {
    fn expand(&self, xr: &DVector<f64>) -> DVector<f64> {
        let mut x = self.base.clone();
        for (i, &f) in self.free.iter().enumerate() {
            x[f] = xr[i];
        }
        x
    }

    fn restrict(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.free.len(), self.free.iter().map(|&i| x[i]))
    }
}

impl NlpProblem for Reduced<'_> {
    fn num_variables(&self) -> usize {
        self.free.len()
    }
    fn num_constraints(&self) -> usize {
        self.tr.rows.len()
    }
    fn variable_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let (l, u) = self.tr.variable_bounds();
        (self.restrict(&l), self.restrict(&u))
    }
    fn constraint_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        self.tr.constraint_bounds()
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        self.tr.objective_value(&self.expand(x))
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.restrict(&self.tr.objective_gradient(&self.expand(x)))
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        self.tr.constraint_values(&self.expand(x))
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.tr.constraint_jacobian(&self.expand(x)).select_columns(&self.free)
    }
    fn hessian(&self, x: &DVector<f64>, sigma: f64, lambda: &DVector<f64>) -> DMatrix<f64> {
        self.tr.lagrangian_hessian(&self.expand(x), sigma, lambda).select_rows(&self.free).select_columns(&self.free)
    }
}

/// Largest violation per constraint group (all non-negative).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub defect: f64,
    pub junction: f64,
    pub guard: f64,
    pub periodicity: f64,
    pub apex: f64,
    /// Foot clearance in flight and unilateral ground force.
    pub admissibility: f64,
    /// Force and mover-travel limits, durations.
    pub bounds: f64,
}

impl Residuals {
    pub fn max_equality(&self) -> f64 {
        self.defect.max(self.junction).max(self.guard).max(self.periodicity).max(self.apex)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentKnots {
    pub domain: DomainId,
    pub duration: f64,
    /// Time since segment start, s.
    pub times: Vec<f64>,
    /// `(z_b, y, delta, dz_b, dy, ddelta)` per knot.
    pub states: Vec<[f64; 6]>,
    /// Actuator force per knot, N.
    pub forces: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub status: NlpStatus,
    pub iterations: usize,
    pub residuals: Residuals,
    pub dual_infeasibility: f64,
    pub complementarity: f64,
    /// Tolerance the equality residual is held to.
    pub equality_tolerance: f64,
}

/// Result of [`solve_hop`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopSolution {
    pub variant: Variant,
    pub clearance: f64,
    pub params: Params,
    /// Segments from apex to apex.
    pub segments: Vec<SegmentKnots>,
    pub phase_durations: Vec<f64>,
    /// Feedforward force on the policy clock (restarted at touchdown).
    pub control: ControlSignal<f64>,
    /// `∫u² dt` over one hop, N²·s.
    pub cost: f64,
    pub diagnostics: SolverDiagnostics,
    pub converged: bool,
    /// One hop of open-loop playback from the optimized apex.
    pub trajectory: HybridTrajectory<f64>,
}

impl HopSolution {
    /// Apex state (start of the descent).
    pub fn apex_state(&self) -> State<f64> {
        let s = self.segments[0].states[0];
        let mut st = State::new(Vector3::new(s[0], s[1], s[2]), Vector3::new(s[3], s[4], s[5]), self.segments[0].domain);
        // The apex lies on the locked-mover surface exactly.
        if st.domain.has_hardstop() {
            st.q[1] = 0.0;
            st.qdot[1] = 0.0;
        }
        st.qdot[0] = 0.0;
        st
    }

    pub fn policy(&self) -> ControlPolicy<f64> {
        ControlPolicy::open_loop(self.control.clone(), self.params.force_limit)
    }

    pub fn peak_force(&self) -> f64 {
        self.control.peak()
    }

    pub fn require_converged(self) -> Result<Self, OptimizeError> {
        if self.converged {
            Ok(self)
        } else {
            Err(OptimizeError::NotConverged {
                status: self.diagnostics.status,
                violation: self.diagnostics.residuals.max_equality(),
            })
        }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// Builds the transcription (decision layout, constraints, bounds, cost).
pub fn transcribe(problem: &HopProblem) -> Result<Transcription, OptimizeError> {
    Transcription::new(problem)
}

fn apex_start(params: &Params, clearance: f64, domain: DomainId) -> State<f64> {
    let y = if domain.has_hardstop() { 0.0 } else { 0.5 * params.mover_travel };
    State::new(Vector3::new(params.rest_length + clearance, y, 0.0), Vector3::zeros(), domain)
}

/// Initial guess: one passive hop from the target apex, sampled at the knots.
/// Falls back to ballistic flight with linearly interpolated contact phases
/// when the passive hop does not follow the segment sequence.
pub fn initial_guess(tr: &Transcription) -> DVector<f64> {
    let p = &tr.params;
    let graph = HybridGraph::selected_cycle(p.variant);
    let start = apex_start(p, tr.clearance, tr.segments[0].domain);
    let sim = Simulator::new(p, &graph, &Passive);
    let stop = StopCondition { max_hops: 1, t_max: 5.0, max_ground_time: 1.0 };
    if let Ok(traj) = sim.simulate_hybrid(&start, 0.0, &stop) {
        if let Ok(x) = tr.pack_trajectory(&traj, &Passive) {
            return x;
        }
    }
    ballistic_guess(tr)
}

fn ballistic_guess(tr: &Transcription) -> DVector<f64> {
    let p = &tr.params;
    let g = p.gravity;
    let t_fall = (2.0 * tr.clearance / g).sqrt();
    let v_td = g * t_fall;
    let mut x = DVector::zeros(tr.num_decision_variables());
    let ns = tr.segments.len();
    let contact = ns - 2;
    let t_contact = 0.08 / contact as f64;
    let y_free = if p.variant == Variant::SingleSpring { 0.5 * p.mover_travel } else { 0.0 };
    for s in 0..ns {
        let duration = if s == 0 || s + 1 == ns { t_fall } else { t_contact };
        for k in 0..tr.knots {
            let t = tr.mesh[k] * duration;
            let i = tr.knot_index(s, k);
            let (z, vz) = if s == 0 {
                (p.rest_length + tr.clearance - 0.5 * g * t * t, -g * t)
            } else if s + 1 == ns {
                (p.rest_length + v_td * t - 0.5 * g * t * t, v_td - g * t)
            } else {
                // Symmetric bounce through the contact phases.
                let phase = (s - 1) as f64 + tr.mesh[k];
                let frac = phase / contact as f64;
                (p.rest_length, -v_td * (1.0 - 2.0 * frac))
            };
            x[i] = z;
            x[i + 1] = y_free;
            x[i + 3] = vz;
            if !tr.segments[s].domain.is_flight() {
                x[i + 2] = p.rest_length - z;
                x[i + 5] = -vz;
            }
        }
        x[tr.duration_index(s)] = duration;
    }
    x
}

/// Solves for the minimum-effort periodic hop. A non-converged solve returns
/// the last iterate with `converged == false`.
pub fn solve_hop(problem: &HopProblem, init: Option<&HopSolution>) -> Result<HopSolution, OptimizeError> {
    let tr = transcribe(problem)?;
    let mut options = problem.solver;
    let x0 = match init {
        Some(sol) => {
            if sol.variant != problem.params.variant {
                return Err(OptimizeError::WarmStartMismatch("model variant differs".into()));
            }
            // Start close to the central path of a nearby problem.
            options.mu_init = options.mu_init.min(1e-4);
            options.bound_push = options.bound_push.min(1e-4);
            tr.pack(&sol.segments)?
        }
        None => initial_guess(&tr),
    };
    let free = tr.free_variables();
    let reduced = Reduced { tr: &tr, free, base: x0.clone() };
    let result = nlp::solve(&reduced, &reduced.restrict(&x0), &options);
    let x = reduced.expand(&result.x);
    let residuals = tr.residuals(&x);
    let equality_tolerance = 1e-6;
    let converged = result.converged() && residuals.max_equality() < equality_tolerance && residuals.bounds <= 0.0;
    build_solution(problem, &tr, &x, SolverDiagnostics {
        status: result.status,
        iterations: result.iterations,
        residuals,
        dual_infeasibility: result.dual_inf,
        complementarity: result.complementarity,
        equality_tolerance,
    }, converged)
}

fn build_solution(
    problem: &HopProblem,
    tr: &Transcription,
    x: &DVector<f64>,
    diagnostics: SolverDiagnostics,
    converged: bool,
) -> Result<HopSolution, OptimizeError> {
    let segments = tr.unpack(x);
    let p = &problem.params;
    // Feedforward knots on the clock that restarts at touchdown.
    let mut knots: Vec<(f64, f64)> = Vec::new();
    let mut t0 = 0.0;
    for (s, seg) in segments.iter().enumerate().skip(1) {
        if tr.segments[s].controlled {
            for (t, u) in seg.times.iter().zip(&seg.forces) {
                let t = t0 + t;
                let u = u.clamp(-p.force_limit, p.force_limit);
                match knots.last() {
                    Some(&(tl, _)) if t <= tl => {}
                    _ => knots.push((t, u)),
                }
            }
        }
        t0 += seg.duration;
    }
    if knots.is_empty() {
        knots.push((0.0, 0.0));
    }
    let control = ControlSignal::new(knots, problem.control_scope.clone())?;
    let mut sol = HopSolution {
        variant: p.variant,
        clearance: problem.clearance,
        params: *p,
        phase_durations: segments.iter().map(|s| s.duration).collect(),
        segments,
        control,
        cost: tr.effort(x),
        diagnostics,
        converged,
        trajectory: HybridTrajectory::empty(),
    };
    let graph = HybridGraph::selected_cycle(p.variant);
    let policy = sol.policy();
    let sim = Simulator::new(p, &graph, &policy);
    let stop = StopCondition { max_hops: 1, t_max: 5.0, max_ground_time: 1.0 };
    if let Ok(traj) = sim.simulate_hybrid(&sol.apex_state(), 0.0, &stop) {
        sol.trajectory = traj;
    }
    Ok(sol)
}

/// Integrator cross-check of a solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    /// Largest knot deviation between each segment's re-integration and the
    /// solution, relative to the coordinate scales.
    pub max_state_deviation: f64,
    /// Largest scaled guard value at the segment ends of the solution.
    pub guard_residual: f64,
    /// Largest section-coordinate difference between the starting apex and
    /// the apex reached by simulating one hop.
    pub periodicity_residual: f64,
    /// `|clearance at the simulated next apex − H_f| / H_f`.
    pub apex_clearance_error: f64,
    /// Largest violation of force, travel, clearance and unilateral-contact
    /// limits along the knots.
    pub constraint_violation: f64,
}

/// Re-integrates every segment from its first knot under the solution's
/// playback, and one full hop from the apex.
pub fn validate_solution(params: &Params, sol: &HopSolution) -> DefectReport {
    let graph = HybridGraph::selected_cycle(params.variant);
    let policy = sol.policy();
    let config = IntegratorConfig::default();
    let sim = Simulator::with_config(params, &graph, &policy, config);
    let pos_scale = params.rest_length;
    let vel_scale = (params.gravity * params.rest_length).sqrt();
    let big = f64::INFINITY;

    let mut max_dev: f64 = 0.0;
    let mut guard_res: f64 = 0.0;
    let mut clock = 0.0;
    let mut violation: f64 = 0.0;
    for (s, seg) in sol.segments.iter().enumerate() {
        let first = seg.states[0];
        let mut st = State::new(Vector3::new(first[0], first[1], first[2]), Vector3::new(first[3], first[4], first[5]), seg.domain);
        // Project the knot onto the domain surface before integrating.
        for c in seg.domain.contacts() {
            match c {
                ContactKind::Hardstop => st.q[1] = 0.0,
                ContactKind::Ground => st.q[2] = params.rest_length - st.q[0],
            }
        }
        if let Ok(proj) = hybrid::apply_reset(params, &st, seg.domain) {
            st = proj;
        }
        if s == 1 {
            clock = 0.0;
        }
        let horizon = seg.duration * 1.0000001;
        match sim.integrate_domain(&st, clock, horizon, false) {
            Ok(phase) => {
                for (k, &t) in seg.times.iter().enumerate() {
                    let t = t.min(phase.duration);
                    let Some(ps) = phase.state_at(t) else { continue };
                    let knot = seg.states[k];
                    for i in 0..6 {
                        let scale = if i < 3 { pos_scale } else { vel_scale };
                        max_dev = max_dev.max((ps.q.iter().chain(ps.qdot.iter()).nth(i).copied().unwrap_or(0.0) - knot[i]).abs() / scale);
                    }
                }
            }
            Err(_) => max_dev = big,
        }
        clock += seg.duration;

        let last = seg.states.len() - 1;
        let xs = seg.states[last];
        let state = State::new(Vector3::new(xs[0], xs[1], xs[2]), Vector3::new(xs[3], xs[4], xs[5]), seg.domain);
        if s + 1 < sol.segments.len() {
            let next = sol.segments[s + 1].domain;
            let guard = graph.exits(seg.domain).find(|e| e.to == next).map(|e| e.guard);
            if let Some(g) = guard {
                let v = g.value(params, &state, seg.forces[last]).map(|v| v / g.scale(params)).unwrap_or(big);
                guard_res = guard_res.max(v.abs());
            }
        }
        for (k, xs) in seg.states.iter().enumerate() {
            let u = seg.forces[k];
            violation = violation.max(u.abs() - params.force_limit);
            if seg.domain.mover_free() {
                violation = violation.max(-xs[1]).max(xs[1] - params.mover_travel);
            }
            let st = State::new(Vector3::new(xs[0], xs[1], xs[2]), Vector3::new(xs[3], xs[4], xs[5]), seg.domain);
            if seg.domain.is_flight() {
                violation = violation.max(-params.foot_height(&st));
            } else if let Ok((_, f)) = hybrid::constrained_dynamics(params, seg.domain, &st.q, &st.qdot, u) {
                violation = violation.max(-f.ground() / (params.total_mass * params.gravity));
            }
        }
    }

    let apex = sol.apex_state();
    let stop = StopCondition { max_hops: 1, t_max: 5.0, max_ground_time: 1.0 };
    let (periodicity, apex_err) = match sim.simulate_hybrid(&apex, 0.0, &stop) {
        Ok(traj) if !traj.apexes.is_empty() => {
            let next = traj.apexes[0].state;
            let d = (next.q - apex.q).amax().max((next.qdot - apex.qdot).amax());
            let clearance = params.foot_height(&next);
            (d, (clearance - sol.clearance).abs() / sol.clearance)
        }
        _ => (big, big),
    };
    DefectReport {
        max_state_deviation: max_dev,
        guard_residual: guard_res,
        periodicity_residual: periodicity,
        apex_clearance_error: apex_err,
        constraint_violation: violation.max(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(variant: Variant) -> HopProblem {
        HopProblem::new(ModelParams::nominal(variant), 0.3)
    }

    #[test]
    fn decision_vector_length_counts_unrolled_segments() {
        let tr = transcribe(&problem(Variant::DoubleSpring).with_knots(20)).unwrap();
        // The flight phase is split at the apex: four segments from three phases.
        assert_eq!(tr.num_segments(), 4);
        assert_eq!(tr.num_decision_variables(), 4 * 20 * 7 + 4);
        let tr = transcribe(&problem(Variant::SingleSpring).with_knots(20)).unwrap();
        assert_eq!(tr.num_decision_variables(), 3 * 20 * 7 + 3);
    }

    #[test]
    fn rejects_non_cycle_sequences() {
        let mut p = problem(Variant::DoubleSpring);
        p.phase_sequence = vec![DomainId::D1, DomainId::D4, DomainId::D3];
        assert!(matches!(transcribe(&p), Err(OptimizeError::InfeasibleStructure(_))));
        p.phase_sequence = vec![DomainId::Flight, DomainId::Ground];
        assert!(matches!(transcribe(&p), Err(OptimizeError::InfeasibleStructure(_))));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let tr = transcribe(&problem(Variant::DoubleSpring).with_knots(5)).unwrap();
        let mut x = initial_guess(&tr);
        for i in 0..x.len() {
            x[i] += 1e-3 * ((i * 37 % 11) as f64 - 5.0) / 5.0;
        }
        for s in 0..tr.num_segments() {
            if tr.segments[s].controlled {
                for k in 0..tr.knots {
                    x[tr.knot_index(s, k) + 6] = 0.1 * k as f64;
                }
            }
        }
        let j = tr.constraint_jacobian(&x);
        let eps = 1e-6;
        for col in 0..x.len() {
            let mut xp = x.clone();
            xp[col] += eps;
            let mut xm = x.clone();
            xm[col] -= eps;
            let fd = (tr.constraint_values(&xp) - tr.constraint_values(&xm)) / (2.0 * eps);
            for row in 0..fd.len() {
                assert!((fd[row] - j[(row, col)]).abs() < 1e-6 * (1.0 + fd[row].abs()), "({row}, {col}): {} vs {}", fd[row], j[(row, col)]);
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let tr = transcribe(&problem(Variant::SingleSpring).with_knots(4)).unwrap();
        let x = initial_guess(&tr) + DVector::from_fn(tr.num_decision_variables(), |i, _| 0.01 * ((i % 7) as f64 - 3.0));
        let m = tr.num_constraints();
        let lambda = DVector::from_fn(m, |i, _| ((i * 13 % 7) as f64 - 3.0) / 3.0);
        let h = tr.lagrangian_hessian(&x, 0.7, &lambda);
        let grad = |x: &DVector<f64>| tr.objective_gradient(x) * 0.7 + tr.constraint_jacobian(x).tr_mul(&lambda);
        let eps = 1e-6;
        for col in 0..x.len() {
            let mut xp = x.clone();
            xp[col] += eps;
            let mut xm = x.clone();
            xm[col] -= eps;
            let fd = (grad(&xp) - grad(&xm)) / (2.0 * eps);
            for row in 0..fd.len() {
                assert!((fd[row] - h[(row, col)]).abs() < 1e-5 * (1.0 + fd[row].abs()), "({row}, {col}): {} vs {}", fd[row], h[(row, col)]);
            }
        }
    }

    #[test]
    fn force_limit_violation_shows_in_bounds() {
        let tr = transcribe(&problem(Variant::DoubleSpring)).unwrap();
        let mut x = initial_guess(&tr);
        let s = tr.segments.iter().position(|s| s.controlled).unwrap();
        x[tr.knot_index(s, 3) + 6] = 1.5;
        assert!(tr.residuals(&x).bounds >= 0.5 - 1e-12);
    }
}
