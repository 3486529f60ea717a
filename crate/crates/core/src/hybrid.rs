//! Hybrid structure: contact domains, guards, constrained dynamics and
//! plastic-impact reset maps.
//!
//! Every contact is a holonomic constraint with a constant Jacobian row:
//! the hardstop pins `y` (`[0 1 0]`) and ground contact pins the foot
//! (`[1 0 1]`). Constrained accelerations and impact resets are both the
//! mass-weighted projection onto the constraint null space.

use std::fmt;

use nalgebra::{DVector, Dyn, OMatrix, Vector3, U3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelParams, State, Variant};
use crate::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HybridError {
    #[error("constraint matrix J M^-1 J^T is singular in domain {0}")]
    SingularConstraint(DomainId),
    #[error("guards {first:?} and {second:?} fire simultaneously in domain {domain}")]
    AmbiguousEvent { domain: DomainId, first: GuardKind, second: GuardKind },
    #[error("domain {domain} has no contact of kind {contact:?}")]
    MissingContact { domain: DomainId, contact: ContactKind },
}

/// Vertex of the hybrid graph.
///
/// `D1`–`D4` belong to the double-spring model, `Flight` and `Ground` to the
/// single-spring model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DomainId {
    /// Flight with the mover resting on the hardstop.
    D1,
    /// Flight with the mover free.
    D2,
    /// Ground contact, mover free.
    D3,
    /// Ground contact with the mover on the hardstop.
    D4,
    Flight,
    Ground,
}

impl DomainId {
    pub const DOUBLE_SPRING: [DomainId; 4] = [DomainId::D1, DomainId::D2, DomainId::D3, DomainId::D4];
    pub const SINGLE_SPRING: [DomainId; 2] = [DomainId::Flight, DomainId::Ground];

    pub fn variant(self) -> Variant {
        match self {
            DomainId::Flight | DomainId::Ground => Variant::SingleSpring,
            _ => Variant::DoubleSpring,
        }
    }

    pub fn has_ground_contact(self) -> bool {
        matches!(self, DomainId::D3 | DomainId::D4 | DomainId::Ground)
    }

    pub fn has_hardstop(self) -> bool {
        matches!(self, DomainId::D1 | DomainId::D4)
    }

    pub fn is_flight(self) -> bool {
        !self.has_ground_contact()
    }

    /// Active contacts, in Jacobian row order.
    pub fn contacts(self) -> &'static [ContactKind] {
        match self {
            DomainId::D1 => &[ContactKind::Hardstop],
            DomainId::D3 | DomainId::Ground => &[ContactKind::Ground],
            DomainId::D4 => &[ContactKind::Hardstop, ContactKind::Ground],
            DomainId::D2 | DomainId::Flight => &[],
        }
    }

    /// Whether the mover coordinate is free to move (and thus actuated).
    pub fn mover_free(self) -> bool {
        !self.has_hardstop()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DomainId::D1 => "D1",
            DomainId::D2 => "D2",
            DomainId::D3 => "D3",
            DomainId::D4 => "D4",
            DomainId::Flight => "Flight",
            DomainId::Ground => "Ground",
        }
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DomainId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "D1" => DomainId::D1,
            "D2" => DomainId::D2,
            "D3" => DomainId::D3,
            "D4" => DomainId::D4,
            "Flight" => DomainId::Flight,
            "Ground" => DomainId::Ground,
            other => return Err(format!("unknown domain '{other}'")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContactKind {
    Hardstop,
    Ground,
}

impl ContactKind {
    pub fn row<T: Real>(self) -> Vector3<T> {
        let (o, z) = (T::one(), T::zero());
        match self {
            ContactKind::Hardstop => Vector3::new(z, o, z),
            ContactKind::Ground => Vector3::new(o, z, o),
        }
    }
}

/// Constraint Jacobian of a domain (`k x 3`, `k` in 0..=2).
pub fn constraint_jacobian<T: Real>(domain: DomainId) -> OMatrix<T, Dyn, U3> {
    let contacts = domain.contacts();
    OMatrix::<T, Dyn, U3>::from_fn(contacts.len(), |i, j| contacts[i].row::<T>()[j])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GuardKind {
    /// Foot height reaches zero while descending.
    Touchdown,
    /// Ground reaction force drops to zero.
    Liftoff,
    /// Mover returns to the hardstop (`y = 0`) while extending.
    HardstopImpact,
    /// Hardstop reaction force drops to zero.
    HardstopRelease,
}

impl GuardKind {
    /// Value whose decreasing zero crossing fires the guard.
    pub fn value<T: Real>(self, params: &ModelParams<T>, state: &State<T>, u: T) -> Result<T, HybridError> {
        match self {
            GuardKind::Touchdown => Ok(params.foot_height(state)),
            GuardKind::HardstopImpact => Ok(state.q[1]),
            GuardKind::Liftoff => contact_force(params, state, u, ContactKind::Ground),
            GuardKind::HardstopRelease => contact_force(params, state, u, ContactKind::Hardstop),
        }
    }

    /// Magnitude used to make event tolerances dimensionless.
    pub fn scale<T: Real>(self, params: &ModelParams<T>) -> T {
        match self {
            GuardKind::Touchdown | GuardKind::HardstopImpact => params.rest_length,
            GuardKind::Liftoff | GuardKind::HardstopRelease => params.total_mass * params.gravity,
        }
    }
}

/// Restriction on the actuator force at the instant an edge is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputCondition {
    Any,
    /// Only taken when the actuator force is exactly zero.
    Zero,
    NonZero,
}

impl InputCondition {
    fn admits<T: Real>(self, u: T) -> bool {
        match self {
            InputCondition::Any => true,
            InputCondition::Zero => u == T::zero(),
            InputCondition::NonZero => u != T::zero(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: DomainId,
    pub guard: GuardKind,
    pub to: DomainId,
    pub input: InputCondition,
}

impl Edge {
    const fn new(from: DomainId, guard: GuardKind, to: DomainId) -> Self {
        Edge { from, guard, to, input: InputCondition::Any }
    }

    const fn when(self, input: InputCondition) -> Self {
        Edge { input, ..self }
    }
}

/// Directed graph of domains and guarded transitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridGraph {
    pub variant: Variant,
    pub edges: Vec<Edge>,
}

impl HybridGraph {
    /// The operating cycle: `D1 -> D3 -> D4 -> D1` for the double-spring
    /// model (touching down with a nonzero force keeps the mover locked and
    /// enters `D4`), `Flight -> Ground -> Flight` for the single-spring model.
    pub fn selected_cycle(variant: Variant) -> Self {
        use DomainId::*;
        use GuardKind::*;
        let edges = match variant {
            Variant::DoubleSpring => vec![
                Edge::new(D1, Touchdown, D3).when(InputCondition::Zero),
                Edge::new(D1, Touchdown, D4).when(InputCondition::NonZero),
                Edge::new(D3, HardstopImpact, D4),
                Edge::new(D4, Liftoff, D1),
            ],
            Variant::SingleSpring => vec![Edge::new(Flight, Touchdown, Ground), Edge::new(Ground, Liftoff, Flight)],
        };
        HybridGraph { variant, edges }
    }

    /// Every physically possible switch between the contact domains.
    pub fn full(variant: Variant) -> Self {
        use DomainId::*;
        use GuardKind::*;
        let edges = match variant {
            Variant::DoubleSpring => vec![
                Edge::new(D1, Touchdown, D3).when(InputCondition::Zero),
                Edge::new(D1, Touchdown, D4).when(InputCondition::NonZero),
                Edge::new(D1, HardstopRelease, D2),
                Edge::new(D2, HardstopImpact, D1),
                Edge::new(D2, Touchdown, D3),
                Edge::new(D3, HardstopImpact, D4),
                Edge::new(D3, Liftoff, D2),
                Edge::new(D4, Liftoff, D1),
                Edge::new(D4, HardstopRelease, D3),
            ],
            Variant::SingleSpring => vec![Edge::new(Flight, Touchdown, Ground), Edge::new(Ground, Liftoff, Flight)],
        };
        HybridGraph { variant, edges }
    }

    pub fn exits(&self, from: DomainId) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(move |e| e.from == from)
    }

    /// Distinct guards monitored while in `from`.
    pub fn guards(&self, from: DomainId) -> Vec<GuardKind> {
        let mut out: Vec<GuardKind> = Vec::new();
        for e in self.exits(from) {
            if !out.contains(&e.guard) {
                out.push(e.guard);
            }
        }
        out
    }

    /// Target of `guard` fired from `from` with actuator force `u`.
    pub fn target<T: Real>(&self, from: DomainId, guard: GuardKind, u: T) -> Option<DomainId> {
        self.exits(from).find(|e| e.guard == guard && e.input.admits(u)).map(|e| e.to)
    }

    pub fn has_edge(&self, from: DomainId, to: DomainId) -> bool {
        self.exits(from).any(|e| e.to == to)
    }

    /// Whether `sequence` (closed back onto its first element) is a cycle of
    /// this graph.
    pub fn is_cycle(&self, sequence: &[DomainId]) -> bool {
        !sequence.is_empty()
            && sequence.iter().all(|d| d.variant() == self.variant)
            && (0..sequence.len()).all(|i| self.has_edge(sequence[i], sequence[(i + 1) % sequence.len()]))
    }

    pub fn domain_spec<T: Real>(&self, id: DomainId) -> DomainSpec<T> {
        DomainSpec {
            id,
            jacobian: constraint_jacobian(id),
            guards: self.guards(id),
            admissible_exits: self.exits(id).map(|e| (e.guard, e.to)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec<T: Real> {
    pub id: DomainId,
    pub jacobian: OMatrix<T, Dyn, U3>,
    pub guards: Vec<GuardKind>,
    pub admissible_exits: Vec<(GuardKind, DomainId)>,
}

/// Constraint forces of a domain, in Jacobian row order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactForces<T> {
    values: [T; 2],
    len: usize,
    domain: DomainId,
}

impl<T: Real> ContactForces<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.values[..self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, contact: ContactKind) -> Option<T> {
        self.domain.contacts().iter().position(|c| *c == contact).map(|i| self.values[i])
    }

    /// Ground reaction, zero in flight.
    pub fn ground(&self) -> T {
        self.get(ContactKind::Ground).unwrap_or_else(T::zero)
    }

    pub fn to_dvector(&self) -> DVector<T> {
        DVector::from_column_slice(self.as_slice())
    }
}

/// Mass-weighted projection of `v` onto the null space of the domain
/// Jacobian: `v - M^-1 J^T (J M^-1 J^T)^-1 J v`. Also returns the
/// multipliers `(J M^-1 J^T)^-1 J v`.
fn project<T: Real>(
    params: &ModelParams<T>,
    domain: DomainId,
    v: &Vector3<T>,
) -> Result<(Vector3<T>, ContactForces<T>), HybridError> {
    let contacts = domain.contacts();
    let m_inv = params.inverse_mass_matrix();
    let mut out = ContactForces { values: [T::zero(); 2], len: contacts.len(), domain };
    match contacts {
        [] => Ok((*v, out)),
        [c] => {
            let r = c.row::<T>();
            let w = m_inv * r;
            let a = r.dot(&w);
            if !(a > T::default_epsilon() * m_inv.norm()) {
                return Err(HybridError::SingularConstraint(domain));
            }
            let lambda = r.dot(v) / a;
            out.values[0] = lambda;
            Ok((v - w * lambda, out))
        }
        [c1, c2] => {
            let (r1, r2) = (c1.row::<T>(), c2.row::<T>());
            let (w1, w2) = (m_inv * r1, m_inv * r2);
            let (a11, a12, a22) = (r1.dot(&w1), r1.dot(&w2), r2.dot(&w2));
            let det = a11 * a22 - a12 * a12;
            let trace = a11 + a22;
            if !(det > T::lit(1e-12) * trace * trace) {
                return Err(HybridError::SingularConstraint(domain));
            }
            let (b1, b2) = (r1.dot(v), r2.dot(v));
            let l1 = (a22 * b1 - a12 * b2) / det;
            let l2 = (a11 * b2 - a12 * b1) / det;
            out.values = [l1, l2];
            Ok((v - w1 * l1 - w2 * l2, out))
        }
        _ => unreachable!("at most two contacts"),
    }
}

/// Accelerations and constraint forces for positions/velocities `q, qdot`.
pub fn constrained_dynamics<T: Real>(
    params: &ModelParams<T>,
    domain: DomainId,
    q: &Vector3<T>,
    qdot: &Vector3<T>,
    u: T,
) -> Result<(Vector3<T>, ContactForces<T>), HybridError> {
    let generalized = params.input_map() * u - params.bias(q, qdot);
    let free = params.inverse_mass_matrix() * generalized;
    // With J-dot = 0, the constrained acceleration is the projected free
    // acceleration and the forces are minus the projection multipliers.
    let (accel, mut forces) = project(params, domain, &free)?;
    for f in forces.values.iter_mut() {
        *f = -*f;
    }
    Ok((accel, forces))
}

/// Constraint forces `F_v` (empty in `D2` / single-spring flight).
pub fn constraint_force<T: Real>(
    params: &ModelParams<T>,
    state: &State<T>,
    u: T,
    domain: DomainId,
) -> Result<DVector<T>, HybridError> {
    constrained_dynamics(params, domain, &state.q, &state.qdot, u).map(|(_, f)| f.to_dvector())
}

/// `(qddot, F_v)` under the constraints of `domain`.
pub fn constrained_accel<T: Real>(
    params: &ModelParams<T>,
    state: &State<T>,
    u: T,
    domain: DomainId,
) -> Result<(Vector3<T>, DVector<T>), HybridError> {
    constrained_dynamics(params, domain, &state.q, &state.qdot, u).map(|(a, f)| (a, f.to_dvector()))
}

fn contact_force<T: Real>(
    params: &ModelParams<T>,
    state: &State<T>,
    u: T,
    contact: ContactKind,
) -> Result<T, HybridError> {
    let (_, forces) = constrained_dynamics(params, state.domain, &state.q, &state.qdot, u)?;
    forces.get(contact).ok_or(HybridError::MissingContact { domain: state.domain, contact })
}

/// Plastic impact into `domain_post`: positions are kept, velocities are
/// projected so that the new constraints hold.
pub fn apply_reset<T: Real>(
    params: &ModelParams<T>,
    state_pre: &State<T>,
    domain_post: DomainId,
) -> Result<State<T>, HybridError> {
    let (qdot, _) = project(params, domain_post, &state_pre.qdot)?;
    Ok(State { q: state_pre.q, qdot, domain: domain_post, t_local: T::zero() })
}

/// Impulses transmitted by the reset into `domain_post`, in Jacobian row order.
pub fn reset_impulse<T: Real>(
    params: &ModelParams<T>,
    state_pre: &State<T>,
    domain_post: DomainId,
) -> Result<DVector<T>, HybridError> {
    let (_, lambda) = project(params, domain_post, &state_pre.qdot)?;
    Ok(lambda.to_dvector())
}

/// Checks which guard of `before.domain` fired over a step from `before` to
/// `after` (each paired with the actuator force at that instant).
///
/// A guard fires on a decreasing crossing: strictly positive before, not
/// positive after. Returns `AmbiguousEvent` when two different guards fire
/// in the same window.
pub fn evaluate_guards<T: Real>(
    graph: &HybridGraph,
    params: &ModelParams<T>,
    before: (&State<T>, T),
    after: (&State<T>, T),
) -> Result<Option<(GuardKind, DomainId)>, HybridError> {
    let domain = before.0.domain;
    let mut fired: Option<(GuardKind, DomainId)> = None;
    for guard in graph.guards(domain) {
        let g0 = guard.value(params, before.0, before.1)?;
        let g1 = guard.value(params, after.0, after.1)?;
        if g0 > T::zero() && g1 <= T::zero() {
            let Some(target) = graph.target(domain, guard, after.1) else { continue };
            if let Some((first, _)) = fired {
                return Err(HybridError::AmbiguousEvent { domain, first, second: guard });
            }
            fired = Some((guard, target));
        }
    }
    Ok(fired)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, Matrix3};
    use proptest::prelude::*;

    fn params(m0: f64, mm: f64, mf: f64) -> ModelParams<f64> {
        let mut p = ModelParams::nominal(Variant::DoubleSpring);
        p.total_mass = m0;
        p.mover_mass = mm;
        p.foot_mass = mf;
        p
    }

    fn state(q: [f64; 3], qdot: [f64; 3], domain: DomainId) -> State<f64> {
        State::new(Vector3::from(q), Vector3::from(qdot), domain)
    }

    #[test]
    fn jacobians_match_contact_rows() {
        let j1 = constraint_jacobian::<f64>(DomainId::D1);
        assert_eq!(j1.nrows(), 1);
        assert_eq!(j1.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0]);
        let j3 = constraint_jacobian::<f64>(DomainId::D3);
        assert_eq!(j3.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 1.0]);
        let j4 = constraint_jacobian::<f64>(DomainId::D4);
        assert_eq!(j4.nrows(), 2);
        assert_eq!(j4.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0]);
        assert_eq!(j4.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 1.0]);
        assert_eq!(constraint_jacobian::<f64>(DomainId::D2).nrows(), 0);
        assert_eq!(constraint_jacobian::<f64>(DomainId::Flight).nrows(), 0);
        assert_eq!(constraint_jacobian::<f64>(DomainId::Ground), j3);
    }

    /// Static rest on the ground: solve Eqs. 3-4 as one linear system in
    /// (delta, F) with zero accelerations and velocities.
    #[test]
    fn ground_rest_force_equals_weight() {
        for variant in [Variant::DoubleSpring, Variant::SingleSpring] {
            let p = ModelParams::nominal(variant);
            // Unknowns x = (z_b, delta, y, F); equations: H(q) = J^T F for
            // the three rows, plus the foot on the ground.
            let g = p.gravity;
            let mut a = DMatrix::<f64>::zeros(4, 4);
            let mut b = nalgebra::DVector::<f64>::zeros(4);
            // row z_b: M0 g = F
            a[(0, 3)] = -1.0;
            b[0] = -p.total_mass * g;
            // row y: k_p y - Mm g = 0 (single spring: mover held at y = 0.01)
            if p.parallel_stiffness > 0.0 {
                a[(1, 2)] = p.parallel_stiffness;
                b[1] = p.mover_mass * g;
            } else {
                a[(1, 2)] = 1.0;
                b[1] = 0.01;
            }
            // row delta: k_s delta + Mf g = F
            a[(2, 1)] = p.series_stiffness;
            a[(2, 3)] = -1.0;
            b[2] = -p.foot_mass * g;
            // contact: z_b + delta = l0
            a[(3, 0)] = 1.0;
            a[(3, 1)] = 1.0;
            b[3] = p.rest_length;
            let x = a.lu().solve(&b).unwrap();
            let s = state([x[0], x[2], x[1]], [0.0; 3], DomainId::D3);
            let s = if variant == Variant::SingleSpring { State { domain: DomainId::Ground, ..s } } else { s };
            // The single-spring mover is not in equilibrium without force,
            // so supply the force that holds it.
            let u = if p.parallel_stiffness > 0.0 { 0.0 } else { -p.mover_mass * g };
            let f = constraint_force(&p, &s, u, s.domain).unwrap();
            assert_eq!(f.len(), 1);
            assert_relative_eq!(f[0], x[3], max_relative = 1e-12);
            assert_relative_eq!(f[0], p.total_mass * g, max_relative = 1e-12);
            let (acc, _) = constrained_accel(&p, &s, u, s.domain).unwrap();
            assert!(acc.norm() < 1e-9, "{acc}");
        }
    }

    #[test]
    fn free_flight_has_no_forces() {
        let p = ModelParams::nominal(Variant::DoubleSpring);
        let s = state([0.7, 0.01, 0.0], [0.3, 0.1, -0.2], DomainId::D2);
        assert_eq!(constraint_force(&p, &s, 3.0, DomainId::D2).unwrap().len(), 0);
    }

    #[test]
    fn free_flight_accel_matches_linear_solve() {
        let mut p = ModelParams::nominal(Variant::DoubleSpring);
        p.body_damping = 0.0;
        p.parallel_damping = 0.0;
        p.series_damping = 0.0;
        let s = state([0.9, 0.0, 0.0], [0.0; 3], DomainId::D2);
        let (acc, _) = constrained_accel(&p, &s, 0.0, DomainId::D2).unwrap();
        let rhs = -p.bias_vector(&s);
        let oracle = p.mass_matrix().lu().solve(&rhs).unwrap();
        assert_relative_eq!(acc, oracle, epsilon = 1e-12);
        // Springs at rest: everything falls together.
        assert_relative_eq!(acc, Vector3::new(-p.gravity, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn locked_domains_annihilate_constrained_rows() {
        let p = ModelParams::nominal(Variant::DoubleSpring);
        let s = state([0.5, 0.0, 0.01], [-1.0, 0.0, 0.4], DomainId::D1);
        let (acc, _) = constrained_accel(&p, &s, 25.0, DomainId::D1).unwrap();
        assert_eq!(acc[1], 0.0);
        let s = state([0.4, 0.0, 0.02], [-1.0, 0.0, 1.0], DomainId::D4);
        let (acc, f) = constrained_accel(&p, &s, 25.0, DomainId::D4).unwrap();
        assert!(acc[1].abs() < 1e-12);
        assert!((acc[0] + acc[2]).abs() < 1e-12);
        assert_eq!(f.len(), 2);
    }

    #[test]
    fn touchdown_zeroes_foot_velocity() {
        let p = ModelParams::nominal(Variant::DoubleSpring);
        let pre = state([p.rest_length, 0.0, 0.0], [-2.4, 0.0, 0.05], DomainId::D1);
        let post = apply_reset(&p, &pre, DomainId::D3).unwrap();
        assert!((post.qdot[0] + post.qdot[2]).abs() < 1e-14);
        // Only the foot changes speed; body and mover keep theirs.
        assert_relative_eq!(post.qdot[0], pre.qdot[0], epsilon = 1e-14);
        assert_relative_eq!(post.qdot[1], pre.qdot[1], epsilon = 1e-14);
        assert_eq!(post.q, pre.q);
        assert_eq!(post.domain, DomainId::D3);
    }

    #[test]
    fn reset_is_identity_on_constraint_surface() {
        let p = ModelParams::nominal(Variant::DoubleSpring);
        let pre = state([0.4, 0.0, 0.0], [-1.5, 0.0, 1.5], DomainId::D3);
        let post = apply_reset(&p, &pre, DomainId::D3).unwrap();
        assert_relative_eq!(post.qdot, pre.qdot, epsilon = 1e-15);
    }

    /// Plastic impact as a KKT system solved with a generic LU:
    /// `[M J^T; J 0] [v+; -P] = [M v-; 0]`.
    fn impact_oracle(p: &ModelParams<f64>, v: Vector3<f64>, domain: DomainId) -> Vector3<f64> {
        let m = p.mass_matrix();
        let j = constraint_jacobian::<f64>(domain);
        let k = j.nrows();
        let mut a = DMatrix::<f64>::zeros(3 + k, 3 + k);
        a.view_mut((0, 0), (3, 3)).copy_from(&m);
        for i in 0..k {
            for c in 0..3 {
                a[(c, 3 + i)] = j[(i, c)];
                a[(3 + i, c)] = j[(i, c)];
            }
        }
        let mut b = nalgebra::DVector::<f64>::zeros(3 + k);
        b.rows_mut(0, 3).copy_from(&(m * v));
        let x = a.lu().solve(&b).unwrap();
        Vector3::new(x[0], x[1], x[2])
    }

    #[test]
    fn hardstop_impact_conserves_body_mover_momentum() {
        let p = params(10.0, 4.0, 1.0);
        let pre = state([0.8, 0.0, 0.0], [0.0, -0.5, 0.0], DomainId::D2);
        let post = apply_reset(&p, &pre, DomainId::D1).unwrap();
        assert!(post.qdot[1].abs() < 1e-15);
        assert_relative_eq!(post.qdot, impact_oracle(&p, pre.qdot, DomainId::D1), epsilon = 1e-12);
        // Physical momentum: body (m0 - mm - mf) at zdot_b, mover at
        // zdot_b - ydot, foot at zdot_b + delta_dot.
        let momentum = |v: &Vector3<f64>| {
            let mb = p.total_mass - p.mover_mass - p.foot_mass;
            mb * v[0] + p.mover_mass * (v[0] - v[1]) + p.foot_mass * (v[0] + v[2])
        };
        assert_relative_eq!(momentum(&post.qdot), momentum(&pre.qdot), epsilon = 1e-12);
        // Mover and body share one velocity afterwards.
        let mover_after = post.qdot[0] - post.qdot[1];
        assert_relative_eq!(mover_after, post.qdot[0], epsilon = 1e-15);
        // 4 kg mover moving up at 0.5 m/s relative; 9 kg of body + mover + foot.
        assert_relative_eq!(post.qdot[0], 4.0 * 0.5 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn touchdown_matches_kkt_oracle() {
        let p = ModelParams::nominal(Variant::DoubleSpring);
        let v = Vector3::new(-2.0, 0.3, 0.4);
        for d in [DomainId::D3, DomainId::D4, DomainId::D1] {
            let post = apply_reset(&p, &state([0.4, 0.0, 0.0], v.into(), DomainId::D2), d).unwrap();
            assert_relative_eq!(post.qdot, impact_oracle(&p, v, d), epsilon = 1e-12);
        }
    }

    #[test]
    fn guards_fire_on_decreasing_crossings() {
        let p = ModelParams::nominal(Variant::DoubleSpring);
        let graph = HybridGraph::selected_cycle(Variant::DoubleSpring);
        let a = state([p.rest_length + 0.001, 0.0, 0.0], [-1.0, 0.0, 0.0], DomainId::D1);
        let b = state([p.rest_length - 0.0001, 0.0, 0.0], [-1.0, 0.0, 0.0], DomainId::D1);
        assert_eq!(
            evaluate_guards(&graph, &p, (&a, 0.0), (&b, 0.0)).unwrap(),
            Some((GuardKind::Touchdown, DomainId::D3))
        );
        assert_eq!(
            evaluate_guards(&graph, &p, (&a, 0.0), (&b, 5.0)).unwrap(),
            Some((GuardKind::Touchdown, DomainId::D4))
        );
        // Rising through the surface does not fire.
        assert_eq!(evaluate_guards(&graph, &p, (&b, 0.0), (&a, 0.0)).unwrap(), None);

        let a = state([0.35, 0.002, 0.05], [0.5, -0.3, -0.5], DomainId::D3);
        let b = state([0.35, -0.0001, 0.05], [0.5, -0.3, -0.5], DomainId::D3);
        assert_eq!(
            evaluate_guards(&graph, &p, (&a, 0.0), (&b, 0.0)).unwrap(),
            Some((GuardKind::HardstopImpact, DomainId::D4))
        );

        // D4 liftoff: the series spring unloads until the ground force is gone.
        let loaded = state([p.rest_length - 0.05, 0.0, 0.05], [1.0, 0.0, -1.0], DomainId::D4);
        let unloaded = state([p.rest_length + 0.01, 0.0, -0.01], [1.0, 0.0, -1.0], DomainId::D4);
        assert_eq!(
            evaluate_guards(&graph, &p, (&loaded, 0.0), (&unloaded, 0.0)).unwrap(),
            Some((GuardKind::Liftoff, DomainId::D1))
        );
    }

    #[test]
    fn simultaneous_guards_are_rejected() {
        let p = ModelParams::nominal(Variant::DoubleSpring);
        let graph = HybridGraph::full(Variant::DoubleSpring);
        // D3 with the mover reaching the hardstop while the ground unloads.
        let a = state([p.rest_length - 0.02, 0.001, 0.02], [1.0, -0.5, -1.0], DomainId::D3);
        let b = state([p.rest_length + 0.02, -0.001, -0.02], [1.0, -0.5, -1.0], DomainId::D3);
        let err = evaluate_guards(&graph, &p, (&a, 0.0), (&b, 0.0)).unwrap_err();
        assert!(matches!(err, HybridError::AmbiguousEvent { .. }));
    }

    #[test]
    fn graphs_contain_their_cycles() {
        use DomainId::*;
        let double = HybridGraph::selected_cycle(Variant::DoubleSpring);
        assert!(double.is_cycle(&[D1, D3, D4]));
        assert!(!double.is_cycle(&[D1, D2, D3, D4]));
        assert!(!double.is_cycle(&[D1, D4, D3]));
        let full = HybridGraph::full(Variant::DoubleSpring);
        assert!(full.is_cycle(&[D1, D2, D3, D4]));
        let single = HybridGraph::selected_cycle(Variant::SingleSpring);
        assert!(single.is_cycle(&[Flight, Ground]));
        assert!(!single.is_cycle(&[D1, D3, D4]));
        let spec = double.domain_spec::<f64>(D4);
        assert_eq!(spec.admissible_exits, vec![(GuardKind::Liftoff, D1)]);
        assert_eq!(spec.jacobian.nrows(), 2);
    }

    fn arb_params() -> impl Strategy<Value = ModelParams<f64>> {
        (1.0..10.0f64, 0.05..0.6f64, 0.01..0.2f64).prop_map(|(m0, mm_frac, mf_frac)| {
            let mut p = ModelParams::nominal(Variant::DoubleSpring);
            p.total_mass = m0;
            p.mover_mass = mm_frac * m0;
            p.foot_mass = mf_frac * m0;
            p
        })
    }

    fn arb_domain() -> impl Strategy<Value = DomainId> {
        prop_oneof![Just(DomainId::D1), Just(DomainId::D2), Just(DomainId::D3), Just(DomainId::D4)]
    }

    proptest! {
        #[test]
        fn mass_matrix_is_spd(p in arb_params()) {
            let m: Matrix3<f64> = p.mass_matrix();
            prop_assert_eq!(m, m.transpose());
            let eig = m.symmetric_eigenvalues();
            prop_assert!(eig.min() > 0.0);
        }

        #[test]
        fn reset_projects_plastically(
            p in arb_params(),
            d in arb_domain(),
            v in prop::array::uniform3(-5.0..5.0f64),
        ) {
            let pre = state([0.5, 0.0, 0.0], v, DomainId::D2);
            let post = apply_reset(&p, &pre, d).unwrap();
            let j = constraint_jacobian::<f64>(d);
            let scale = 1.0 + Vector3::from(v).norm();
            prop_assert!((&j * post.qdot).amax() < 1e-10 * scale);
            let ke_pre = p.kinetic_energy(&pre.qdot);
            let ke_post = p.kinetic_energy(&post.qdot);
            prop_assert!(ke_post <= ke_pre * (1.0 + 1e-14) + 1e-14);
            let twice = apply_reset(&p, &post, d).unwrap();
            prop_assert!((twice.qdot - post.qdot).amax() < 1e-12 * scale);
            // Generalized momentum orthogonal to the constraint rows is kept:
            // for any t with J t = 0, t^T M qdot is unchanged.
            let m = p.mass_matrix();
            let tangents: Vec<Vector3<f64>> = match d {
                DomainId::D1 => vec![Vector3::x(), Vector3::z()],
                DomainId::D3 => vec![Vector3::y(), Vector3::new(1.0, 0.0, -1.0)],
                DomainId::D4 => vec![Vector3::new(1.0, 0.0, -1.0)],
                _ => vec![Vector3::x(), Vector3::y(), Vector3::z()],
            };
            for t in tangents {
                let before = t.dot(&(m * pre.qdot));
                let after = t.dot(&(m * post.qdot));
                prop_assert!((before - after).abs() < 1e-10 * scale * m.norm());
            }
        }

        #[test]
        fn constrained_accel_satisfies_constraints(
            p in arb_params(),
            d in arb_domain(),
            q in prop::array::uniform3(-0.1..0.1f64),
            v in prop::array::uniform3(-3.0..3.0f64),
            u in -400.0..400.0f64,
        ) {
            let s = state(q, v, d);
            let (acc, f) = constrained_accel(&p, &s, u, d).unwrap();
            let j = constraint_jacobian::<f64>(d);
            let scale = (acc.norm() + p.gravity) * 1.0;
            prop_assert!((&j * acc).amax() < 1e-10 * scale);
            // Substituting F back into the equations of motion reproduces acc.
            let jt_f = j.transpose() * f;
            let rhs = p.input_map() * u + jt_f - p.bias_vector(&s);
            let resid = p.mass_matrix() * acc - rhs;
            prop_assert!(resid.amax() < 1e-9 * (rhs.amax() + 1.0));
        }

        #[test]
        fn double_spring_bias_differs_only_by_parallel_stiffness(
            q in prop::array::uniform3(-0.1..0.1f64),
            v in prop::array::uniform3(-3.0..3.0f64),
        ) {
            let double = ModelParams::nominal(Variant::DoubleSpring);
            let single = double.with_variant(Variant::SingleSpring);
            let s = state(q, v, DomainId::D2);
            let diff = double.bias_vector(&s) - single.bias_vector(&s);
            prop_assert_eq!(diff[0], 0.0);
            prop_assert_eq!(diff[2], 0.0);
            prop_assert!((diff[1] - double.parallel_stiffness * q[1]).abs() < 1e-12);
        }
    }
}
